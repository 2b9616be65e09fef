"""CAM weighting schemes, map assembly, and guided fusion.

Every method produces per-channel weights for a chosen spatial layer; the map
is the weighted sum of that layer's feature maps, ReLU-rectified and
bilinearly upsampled to the input size.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import runtime
from .autodiff import GradientTrace, backward
from .network import ActivationTrace, ArchitectureError, Network, forward_ablated
from .tensor import ShapeMismatchError, Tensor, upsample_bilinear


class CamMethod(enum.Enum):
    GRAD_CAM = "grad_cam"
    GRAD_CAM_PP = "grad_cam_pp"
    ABLATION_CAM = "ablation_cam"
    XGRAD_CAM = "xgrad_cam"
    CAM_GAP = "cam_gap"


@dataclass(frozen=True)
class CamResult:
    """Weights plus the assembled map, before and after postprocessing."""

    method: CamMethod
    weights: Tensor
    raw_map: Tensor
    heatmap: Tensor
    target_layer: int
    class_index: int


def _spatial_activation(trace: ActivationTrace, layer: int) -> np.ndarray:
    act = trace.outputs[layer]
    if act.ndim != 3:
        raise ArchitectureError(f"layer {layer} is not spatial (shape {act.shape})")
    return act.array


def weights_grad_cam(trace: ActivationTrace, gradients: GradientTrace, layer: int) -> Tensor:
    """Per-channel spatial mean of the gradient map."""
    _spatial_activation(trace, layer)
    return Tensor(gradients.gradients[layer].array.mean(axis=(1, 2)))


def weights_xgrad_cam(trace: ActivationTrace, gradients: GradientTrace, layer: int) -> Tensor:
    """Activation-weighted average of the gradient map per channel.

    Channels whose activations sum to zero get weight 0: they contribute
    nothing to the map and the weighting ratio is undefined there.
    """
    feats = _spatial_activation(trace, layer)
    grads = gradients.gradients[layer].array
    sums = feats.sum(axis=(1, 2))
    dots = (feats * grads).sum(axis=(1, 2))
    out = np.divide(dots, sums, out=np.zeros_like(dots), where=sums != 0.0)
    return Tensor(out)


def per_channel_score_drops(
    net: Network,
    trace: ActivationTrace,
    layer: int,
    class_index: int,
    threads: int | None = None,
) -> Tensor:
    """Score change caused by zeroing each channel of the target layer in turn."""
    feats = _spatial_activation(trace, layer)
    score = float(trace.scores.array[class_index])

    def drop(k: int) -> float:
        ablated = forward_ablated(net, trace, layer, k)
        return score - float(ablated.array[class_index])

    return Tensor(runtime.parallel_map(drop, range(feats.shape[0]), threads))


def weights_ablation_cam(
    net: Network,
    trace: ActivationTrace,
    layer: int,
    class_index: int,
    score_drops: Tensor | None = None,
    threads: int | None = None,
) -> Tensor:
    """Per-channel score drop divided by the channel's activation sum.

    Costs one ablated forward pass per channel when drops are not supplied.
    """
    feats = _spatial_activation(trace, layer)
    if score_drops is None:
        score_drops = per_channel_score_drops(net, trace, layer, class_index, threads)
    sums = feats.sum(axis=(1, 2))
    drops = score_drops.array
    out = np.divide(drops, sums, out=np.zeros_like(drops), where=sums != 0.0)
    return Tensor(out)


def weights_grad_cam_pp(trace: ActivationTrace, gradients: GradientTrace, layer: int) -> Tensor:
    """Closed-form pixel weighting of rectified gradients.

    a_k(x,y) = g^2 / (2 g^2 + sum(F_k) * g^3) with g the pixel gradient and
    a_k(x,y) = 0 where the denominator vanishes; weight_k = sum a_k * relu(g).
    """
    feats = _spatial_activation(trace, layer)
    grads = gradients.gradients[layer].array
    g2 = grads * grads
    denom = 2.0 * g2 + feats.sum(axis=(1, 2))[:, None, None] * g2 * grads
    alpha = np.divide(g2, denom, out=np.zeros_like(g2), where=denom != 0.0)
    return Tensor((alpha * np.maximum(grads, 0.0)).sum(axis=(1, 2)))


def weights_cam_gap(net: Network, layer: int, class_index: int) -> Tensor:
    """Classifier weight row for GAP architectures (target -> GAP -> dense)."""
    n = len(net.layers)
    if layer + 2 != n - 1 or net.layers[layer + 1].kind != "avgpool_global" or net.layers[n - 1].kind != "dense":
        raise ArchitectureError(
            "cam_gap requires the target layer to feed avgpool_global followed by the final dense layer"
        )
    if len(net.output_shapes[layer]) != 3:
        raise ArchitectureError(f"layer {layer} is not spatial")
    row = net.layers[n - 1].weights.array[class_index]
    return Tensor(row.copy())


def assemble(
    weights: Tensor,
    trace: ActivationTrace,
    layer: int,
    output_size: tuple[int, int],
    method: CamMethod = CamMethod.XGRAD_CAM,
    class_index: int = 0,
) -> CamResult:
    """Weighted sum of feature maps, then ReLU and bilinear upsample to output_size."""
    feats = _spatial_activation(trace, layer)
    if weights.shape != (feats.shape[0],):
        raise ShapeMismatchError(weights.shape, (feats.shape[0],), "weights vs channels")
    raw = np.tensordot(weights.array, feats, axes=1)
    rect = np.maximum(raw, 0.0)
    heat = upsample_bilinear(Tensor(rect), output_size)
    return CamResult(
        method=method,
        weights=weights,
        raw_map=Tensor(raw),
        heatmap=heat,
        target_layer=layer,
        class_index=class_index,
    )


def guided_fuse(cam: CamResult, guided: Tensor) -> Tensor:
    """Elementwise product of a guided-backprop map with the heatmap per channel."""
    if guided.ndim != 3 or guided.shape[1:] != cam.heatmap.shape:
        raise ShapeMismatchError(guided.shape, cam.heatmap.shape, "guided map vs heatmap")
    return Tensor(guided.array * cam.heatmap.array[None, :, :])


def compute_cam(
    net: Network,
    trace: ActivationTrace,
    method: CamMethod,
    layer: int | None = None,
    class_index: int | None = None,
    gradients: GradientTrace | None = None,
    score_drops: Tensor | None = None,
    threads: int | None = None,
) -> CamResult:
    """One-stop map computation; defaults: last spatial layer, top-1 class."""
    if layer is None:
        layer = net.last_spatial_layer()
    if class_index is None:
        class_index = int(np.argmax(trace.scores.array))
    if method is CamMethod.CAM_GAP:
        weights = weights_cam_gap(net, layer, class_index)
    elif method is CamMethod.ABLATION_CAM:
        weights = weights_ablation_cam(net, trace, layer, class_index, score_drops, threads)
    else:
        if gradients is None or gradients.class_index != class_index:
            gradients = backward(net, trace, class_index)
        if method is CamMethod.GRAD_CAM:
            weights = weights_grad_cam(trace, gradients, layer)
        elif method is CamMethod.XGRAD_CAM:
            weights = weights_xgrad_cam(trace, gradients, layer)
        elif method is CamMethod.GRAD_CAM_PP:
            weights = weights_grad_cam_pp(trace, gradients, layer)
        else:
            raise ValueError(f"unknown method {method}")
    size = _input_spatial_size(net)
    return assemble(weights, trace, layer, size, method=method, class_index=class_index)


def _input_spatial_size(net: Network) -> tuple[int, int]:
    if len(net.input_shape) != 3:
        raise ArchitectureError("heatmap assembly needs a C x H x W network input")
    return net.input_shape[1], net.input_shape[2]
