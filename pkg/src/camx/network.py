"""Immutable ReLU-CNN definition and a trace-recording forward pass.

Supported layer kinds: conv2d, relu, maxpool, avgpool_global, flatten, dense.
The final layer must be dense and produces the pre-softmax score vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor

LAYER_KINDS = ("conv2d", "relu", "maxpool", "avgpool_global", "flatten", "dense")


class ArchitectureError(ValueError):
    """Raised when a layer chain or layer parameters are invalid."""


@dataclass(frozen=True)
class LayerSpec:
    """One layer of the network.

    Weight layout: conv2d weights are [C_out, C_in, kH, kW] with bias length
    C_out; dense weights are [units_out, units_in] with bias length units_out.
    relu / maxpool / avgpool_global / flatten carry no parameters, so every
    unit they output has a zero bias term.
    """

    kind: str
    name: str = ""
    weights: Optional[Tensor] = None
    biases: Optional[Tensor] = None
    kernel: tuple[int, int] = (0, 0)
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ArchitectureError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv2d":
            if self.weights is None or self.weights.ndim != 4:
                raise ArchitectureError(f"{self.label}: conv2d weights must be 4-D [C_out, C_in, kH, kW]")
            c_out = self.weights.shape[0]
            if self.biases is None or self.biases.shape != (c_out,):
                raise ArchitectureError(f"{self.label}: conv2d bias must have length {c_out}")
            if self.stride < 1 or self.padding < 0:
                raise ArchitectureError(f"{self.label}: bad stride/padding")
        elif self.kind == "dense":
            if self.weights is None or self.weights.ndim != 2:
                raise ArchitectureError(f"{self.label}: dense weights must be 2-D [units_out, units_in]")
            if self.biases is None or self.biases.shape != (self.weights.shape[0],):
                raise ArchitectureError(f"{self.label}: dense bias must have length {self.weights.shape[0]}")
        elif self.kind == "maxpool":
            if min(self.kernel) < 1 or self.stride < 1:
                raise ArchitectureError(f"{self.label}: maxpool needs kernel >= 1 and stride >= 1")
            if self.padding != 0:
                raise ArchitectureError(f"{self.label}: maxpool padding is not supported")
            if self.weights is not None or self.biases is not None:
                raise ArchitectureError(f"{self.label}: maxpool carries no parameters")
        else:
            if self.weights is not None or self.biases is not None:
                raise ArchitectureError(f"{self.label}: {self.kind} carries no parameters")

    @property
    def label(self) -> str:
        return self.name or self.kind

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        """Shape this layer produces from `in_shape`; raises on incompatibility."""
        if self.kind == "conv2d":
            if len(in_shape) != 3:
                raise ArchitectureError(f"{self.label}: conv2d needs a C x H x W input, got {in_shape}")
            c_out, c_in, kh, kw = self.weights.shape
            c, h, w = in_shape
            if c != c_in:
                raise ArchitectureError(f"{self.label}: expects {c_in} input channels, got {c}")
            oh = (h + 2 * self.padding - kh) // self.stride + 1
            ow = (w + 2 * self.padding - kw) // self.stride + 1
            if oh < 1 or ow < 1 or (h + 2 * self.padding) < kh or (w + 2 * self.padding) < kw:
                raise ArchitectureError(f"{self.label}: kernel {kh}x{kw} does not fit input {in_shape}")
            return (c_out, oh, ow)
        if self.kind == "relu":
            return in_shape
        if self.kind == "maxpool":
            if len(in_shape) != 3:
                raise ArchitectureError(f"{self.label}: maxpool needs a C x H x W input, got {in_shape}")
            c, h, w = in_shape
            kh, kw = self.kernel
            if h < kh or w < kw:
                raise ArchitectureError(f"{self.label}: window {kh}x{kw} does not fit input {in_shape}")
            return (c, (h - kh) // self.stride + 1, (w - kw) // self.stride + 1)
        if self.kind == "avgpool_global":
            if len(in_shape) != 3:
                raise ArchitectureError(f"{self.label}: global average pool needs a C x H x W input, got {in_shape}")
            return (in_shape[0],)
        if self.kind == "flatten":
            n = 1
            for d in in_shape:
                n *= d
            return (n,)
        # dense
        if len(in_shape) != 1:
            raise ArchitectureError(f"{self.label}: dense needs a 1-D input (flatten first), got {in_shape}")
        units_out, units_in = self.weights.shape
        if in_shape[0] != units_in:
            raise ArchitectureError(f"{self.label}: expects {units_in} inputs, got {in_shape[0]}")
        return (units_out,)

    def apply(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "conv2d":
            return _conv2d_forward(x, self.weights.array, self.biases.array, self.stride, self.padding)
        if self.kind == "relu":
            return np.maximum(x, 0.0)
        if self.kind == "maxpool":
            return _maxpool_forward(x, self.kernel, self.stride)
        if self.kind == "avgpool_global":
            return x.mean(axis=(1, 2))
        if self.kind == "flatten":
            return x.reshape(-1)
        return self.weights.array @ x + self.biases.array

    def vjp(self, x_in: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
        """Gradient of the scalar objective w.r.t. this layer's input."""
        if self.kind == "conv2d":
            return _conv2d_backward(x_in.shape, self.weights.array, grad_out, self.stride, self.padding)
        if self.kind == "relu":
            return np.where(x_in > 0.0, grad_out, 0.0)
        if self.kind == "maxpool":
            return _maxpool_backward(x_in, self.kernel, self.stride, grad_out)
        if self.kind == "avgpool_global":
            _, h, w = x_in.shape
            return np.broadcast_to(grad_out[:, None, None] / (h * w), x_in.shape).copy()
        if self.kind == "flatten":
            return grad_out.reshape(x_in.shape)
        return self.weights.array.T @ grad_out

    def bias_dot(self, grad_out: np.ndarray) -> float:
        """Sum over units of (gradient at the unit) * (bias term of the unit)."""
        if self.kind == "conv2d":
            return float(self.biases.array @ grad_out.sum(axis=(1, 2)))
        if self.kind == "dense":
            return float(self.biases.array @ grad_out)
        return 0.0


@dataclass(frozen=True)
class Network:
    """Ordered layer chain; validated once, immutable afterwards."""

    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    mean: tuple[float, ...] = (0.0,)
    std: tuple[float, ...] = (1.0,)
    class_labels: Optional[tuple[str, ...]] = None
    output_shapes: tuple[tuple[int, ...], ...] = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if len(self.input_shape) not in (1, 3):
            raise ArchitectureError(f"input shape must be (C, H, W) or (n,), got {self.input_shape}")
        if not self.layers:
            raise ArchitectureError("network has no layers")
        shapes = []
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
            shapes.append(shape)
        if self.layers[-1].kind != "dense":
            raise ArchitectureError("final layer must be dense (pre-softmax scores)")
        object.__setattr__(self, "output_shapes", tuple(shapes))
        if len(self.mean) not in (1, self.input_shape[0]) or len(self.std) != len(self.mean):
            raise ArchitectureError(
                f"normalization mean/std must have 1 or {self.input_shape[0]} entries"
            )
        if any(s == 0 for s in self.std):
            raise ArchitectureError("normalization std must be nonzero")

    @property
    def num_classes(self) -> int:
        return self.output_shapes[-1][0]

    def layer_index(self, ref: "int | str") -> int:
        """Resolve a layer by name (exact match) or integer index."""
        if isinstance(ref, str):
            for i, layer in enumerate(self.layers):
                if layer.name == ref:
                    return i
            try:
                ref = int(ref)
            except ValueError:
                raise ArchitectureError(f"no layer named {ref!r}") from None
        idx = int(ref)
        if not (-len(self.layers) <= idx < len(self.layers)):
            raise ArchitectureError(f"layer index {idx} out of range (0..{len(self.layers) - 1})")
        return idx % len(self.layers)

    def spatial_layers(self) -> list[int]:
        """Indices of layers whose output keeps a spatial extent."""
        return [i for i, s in enumerate(self.output_shapes) if len(s) == 3]

    def last_spatial_layer(self) -> int:
        """Default CAM target: last ReLU-rectified layer with spatial extent > 1x1."""
        for i in reversed(range(len(self.layers))):
            shape = self.output_shapes[i]
            if self.layers[i].kind == "relu" and len(shape) == 3 and (shape[1] > 1 or shape[2] > 1):
                return i
        raise ArchitectureError("network has no ReLU-rectified spatial layer")


@dataclass(frozen=True)
class ActivationTrace:
    """Input plus every layer's output for one forward pass."""

    input: Tensor
    outputs: tuple[Tensor, ...]

    @property
    def scores(self) -> Tensor:
        return self.outputs[-1]

    def activation(self, layer: int) -> Tensor:
        """Output of layer `layer`; layer -1 means the network input."""
        if layer == -1:
            return self.input
        return self.outputs[layer]


def normalize_image(net: Network, image: Tensor) -> Tensor:
    """Per-channel (x - mean) / std on a raw CHW (or 1-D) input."""
    if image.shape != net.input_shape:
        raise ArchitectureError(f"input shape {image.shape} != network input {net.input_shape}")
    mean = np.asarray(net.mean, dtype=np.float64)
    std = np.asarray(net.std, dtype=np.float64)
    if image.ndim == 3:
        mean = mean.reshape(-1, 1, 1)
        std = std.reshape(-1, 1, 1)
    return Tensor((image.array - mean) / std)


def forward(net: Network, image: Tensor) -> ActivationTrace:
    """Run the network on an already-normalized input, recording every activation."""
    if image.shape != net.input_shape:
        raise ArchitectureError(f"input shape {image.shape} != network input {net.input_shape}")
    x = image.array
    outputs = []
    for layer in net.layers:
        x = layer.apply(x)
        outputs.append(Tensor(x))
    return ActivationTrace(input=image, outputs=tuple(outputs))


def forward_tail(net: Network, layer: int, activation: np.ndarray) -> np.ndarray:
    """Re-run layers layer+1 .. L-1 from a replacement activation; returns scores."""
    x = activation
    for spec in net.layers[layer + 1:]:
        x = spec.apply(x)
    return x


def forward_ablated(net: Network, trace: ActivationTrace, layer: int, channel: int) -> Tensor:
    """Scores with channel `channel` of layer `layer`'s output replaced by zeros.

    Layers at or below `layer` are reused from the trace, not recomputed.
    """
    out = trace.outputs[layer]
    if out.ndim != 3:
        raise ArchitectureError(f"layer {layer} is not spatial (shape {out.shape})")
    if not (0 <= channel < out.shape[0]):
        raise ArchitectureError(f"channel {channel} out of range for layer {layer} ({out.shape[0]} channels)")
    ablated = out.array.copy()
    ablated[channel] = 0.0
    return Tensor(forward_tail(net, layer, ablated))


def softmax_confidence(scores: Tensor, class_index: int) -> float:
    """Softmax probability of one class; max-shifted so large scores cannot overflow."""
    s = scores.array
    if not (0 <= class_index < s.shape[0]):
        raise IndexError(f"class {class_index} out of range ({s.shape[0]} classes)")
    z = np.exp(s - s.max())
    return float(z[class_index] / z.sum())


def top_class(trace: ActivationTrace) -> int:
    return int(np.argmax(trace.scores.array))


# -- conv / pool kernels ------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    cols = np.empty((c, kh, kw, oh, ow), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = x[:, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(c * kh * kw, oh * ow), oh, ow


def _conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, pad: int) -> np.ndarray:
    c_out, c_in, kh, kw = w.shape
    cols, oh, ow = _im2col(x, kh, kw, stride, pad)
    out = w.reshape(c_out, -1) @ cols + b[:, None]
    return out.reshape(c_out, oh, ow)


def _conv2d_backward(in_shape: tuple, w: np.ndarray, grad_out: np.ndarray, stride: int, pad: int) -> np.ndarray:
    c_out, c_in, kh, kw = w.shape
    c, h, w_in = in_shape
    oh, ow = grad_out.shape[1:]
    cols_grad = w.reshape(c_out, -1).T @ grad_out.reshape(c_out, -1)
    cols_grad = cols_grad.reshape(c_in, kh, kw, oh, ow)
    padded = np.zeros((c_in, h + 2 * pad, w_in + 2 * pad), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            padded[:, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols_grad[:, i, j]
    if pad:
        return padded[:, pad:pad + h, pad:pad + w_in]
    return padded


def _pool_windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    win = np.empty((c, oh, ow, kh * kw), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            win[:, :, :, i * kw + j] = x[:, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return win


def _maxpool_forward(x: np.ndarray, kernel: tuple[int, int], stride: int) -> np.ndarray:
    win = _pool_windows(x, kernel[0], kernel[1], stride)
    return win.max(axis=3)


def _maxpool_backward(x_in: np.ndarray, kernel: tuple[int, int], stride: int, grad_out: np.ndarray) -> np.ndarray:
    kh, kw = kernel
    win = _pool_windows(x_in, kh, kw, stride)
    # argmax picks the first (row-major within the window) maximal element
    amax = win.argmax(axis=3)
    c, oh, ow = grad_out.shape
    grad_in = np.zeros_like(x_in)
    ci, oi, oj = np.meshgrid(np.arange(c), np.arange(oh), np.arange(ow), indexing="ij")
    rows = oi * stride + amax // kw
    cols = oj * stride + amax % kw
    np.add.at(grad_in, (ci.ravel(), rows.ravel(), cols.ravel()), grad_out.ravel())
    return grad_in
