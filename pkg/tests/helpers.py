"""Shared test utilities: seeded random network generators, finite-difference
gradients, and piecewise-linearity signatures for kink-free FD checks."""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from camx import LayerSpec, Network, Tensor, forward
from camx.cam import per_channel_score_drops


def conv(rng, name, c_in, c_out, k=3, stride=1, padding=1, bias_shift=0.05):
    fan_in = c_in * k * k
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (c_out, c_in, k, k))
    b = rng.normal(bias_shift, 0.05, c_out)
    return LayerSpec("conv2d", name, Tensor(w), Tensor(b), stride=stride, padding=padding)


def dense(rng, name, n_in, n_out, bias_shift=0.05):
    w = rng.normal(0.0, np.sqrt(2.0 / n_in), (n_out, n_in))
    b = rng.normal(bias_shift, 0.05, n_out)
    return LayerSpec("dense", name, Tensor(w), Tensor(b))


def random_image_net(rng, min_layers=2, max_layers=6) -> tuple[Network, Tensor]:
    """Random ReLU-CNN on a small image input, plus a random input for it.

    Mixes conv/relu/maxpool blocks with either a GAP head or a flatten head;
    total depth stays within [min_layers, max_layers].
    """
    for _ in range(100):
        size = int(rng.integers(6, 13))
        c_in = int(rng.choice([1, 3]))
        classes = int(rng.integers(2, 6))
        layers = []
        c, h, w = c_in, size, size
        n_blocks = int(rng.integers(0, 3))
        for i in range(n_blocks):
            c_out = int(rng.integers(3, 9))
            layers.append(conv(rng, f"conv{i}", c, c_out))
            layers.append(LayerSpec("relu", f"relu{i}"))
            c = c_out
            if h >= 4 and rng.random() < 0.5:
                layers.append(LayerSpec("maxpool", f"pool{i}", kernel=(2, 2), stride=2))
                h, w = (h - 2) // 2 + 1, (w - 2) // 2 + 1
        if rng.random() < 0.4 and layers:
            layers.append(LayerSpec("avgpool_global", "gap"))
            layers.append(dense(rng, "fc", c, classes))
        else:
            layers.append(LayerSpec("flatten", "flat"))
            n = c * h * w
            if rng.random() < 0.5 and len(layers) + 3 <= max_layers:
                hidden = int(rng.integers(4, 17))
                layers.append(dense(rng, "fc1", n, hidden))
                layers.append(LayerSpec("relu", "relu_fc"))
                layers.append(dense(rng, "fc2", hidden, classes))
            else:
                layers.append(dense(rng, "fc", n, classes))
        if not (min_layers <= len(layers) <= max_layers):
            continue
        net = Network(
            layers=tuple(layers),
            input_shape=(c_in, size, size),
            mean=(0.0,),
            std=(1.0,),
        )
        image = Tensor(rng.normal(0.0, 1.0, (c_in, size, size)))
        return net, image
    raise RuntimeError("random_image_net failed to produce a net within the layer budget")


def random_vector_net(rng, min_layers=2, max_layers=6) -> tuple[Network, Tensor]:
    """Random dense/relu chain on a 1-D input."""
    n_in = int(rng.integers(3, 10))
    classes = int(rng.integers(2, 6))
    depth = int(rng.integers(min_layers, max_layers + 1))
    layers = []
    n = n_in
    while len(layers) + 1 < depth:
        hidden = int(rng.integers(3, 10))
        layers.append(dense(rng, f"fc{len(layers)}", n, hidden))
        n = hidden
        if len(layers) + 2 <= depth - 1:
            layers.append(LayerSpec("relu", f"relu{len(layers)}"))
    layers.append(dense(rng, "fc_out", n, classes))
    net = Network(layers=tuple(layers), input_shape=(n_in,), mean=(0.0,), std=(1.0,))
    return net, Tensor(rng.normal(0.0, 1.0, (n_in,)))


def random_net(rng, min_layers=2, max_layers=6) -> tuple[Network, Tensor]:
    if rng.random() < 0.25:
        return random_vector_net(rng, min_layers, max_layers)
    return random_image_net(rng, min_layers, max_layers)


def random_gap_net(rng, require_live=True) -> tuple[Network, Tensor, int]:
    """conv -> relu -> GAP -> dense net whose target-layer channels all carry
    mass and whose per-channel ablation drops are not lost in rounding.

    Returns (net, image, target_layer). Resamples until every channel sum is
    healthy, so the channel-weight comparisons are numerically meaningful.
    """
    for _ in range(200):
        size = int(rng.integers(5, 10))
        c_in = int(rng.choice([1, 3]))
        c_mid = int(rng.integers(3, 8))
        classes = int(rng.integers(2, 5))
        layers = (
            conv(rng, "conv0", c_in, c_mid, bias_shift=0.3),
            LayerSpec("relu", "relu0"),
            LayerSpec("avgpool_global", "gap"),
            dense(rng, "fc", c_mid, classes, bias_shift=0.0),
        )
        net = Network(layers=layers, input_shape=(c_in, size, size), mean=(0.0,), std=(1.0,))
        image = Tensor(rng.normal(0.0, 1.0, (c_in, size, size)))
        if not require_live:
            return net, image, 1
        trace = forward(net, image)
        feats = trace.outputs[1].array
        sums = feats.sum(axis=(1, 2))
        if sums.min() < 0.5:
            continue
        c = int(np.argmax(trace.scores.array))
        score = float(trace.scores.array[c])
        row = net.layers[3].weights.array[c]
        z = size * size
        drops = np.abs(row * sums / z)
        if drops.min() < 1e-3 * max(abs(score), 1.0) or abs(score) < 1e-2:
            continue
        return net, image, 1
    raise RuntimeError("random_gap_net failed to find a live configuration")


def healthy_trace(net: Network, rng, min_score=1e-3, tries=50):
    """Forward trace whose top-1 score is comfortably nonzero (resampled input)."""
    for _ in range(tries):
        image = Tensor(rng.normal(0.0, 1.0, net.input_shape))
        trace = forward(net, image)
        c = int(np.argmax(trace.scores.array))
        if abs(trace.scores.array[c]) >= min_score:
            return image, trace, c
    return image, trace, c


def linearity_signature(net: Network, x: np.ndarray) -> tuple:
    """Which affine region of the piecewise-linear network x falls in.

    Encodes every ReLU's activation pattern and every maxpool's argmax
    routing. Two inputs with equal signatures are connected by a region where
    the network is affine, so central differences there are exact up to
    rounding.
    """
    parts = []
    for layer in net.layers:
        if layer.kind == "relu":
            parts.append(("relu", (x > 0.0).tobytes()))
        elif layer.kind == "maxpool":
            kh, kw = layer.kernel
            s = layer.stride
            c, h, w = x.shape
            oh, ow = (h - kh) // s + 1, (w - kw) // s + 1
            idx = np.empty((c, oh, ow), dtype=np.int64)
            for i in range(oh):
                for j in range(ow):
                    win = x[:, i * s:i * s + kh, j * s:j * s + kw].reshape(c, -1)
                    idx[:, i, j] = np.argmax(win, axis=1)
            parts.append(("maxpool", idx.tobytes()))
        x = layer.apply(x)
    return tuple(parts)


def fd_gradient_components(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    components: np.ndarray,
    h: float = 1e-5,
) -> np.ndarray:
    """Central finite differences of f at x along the given flat indices."""
    out = np.empty(len(components))
    flat = x.reshape(-1)
    for i, idx in enumerate(components):
        orig = flat[idx]
        flat[idx] = orig + h
        hi = f(x)
        flat[idx] = orig - h
        lo = f(x)
        flat[idx] = orig
        out[i] = (hi - lo) / (2.0 * h)
    return out


def kink_free_components(
    net: Network, x: np.ndarray, components: np.ndarray, h: float = 1e-5
) -> np.ndarray:
    """Subset of flat input indices whose +/-h perturbations stay inside the
    base input's affine region."""
    base = linearity_signature(net, x)
    keep = []
    flat = x.reshape(-1)
    for idx in components:
        orig = flat[idx]
        flat[idx] = orig + h
        hi = linearity_signature(net, x)
        flat[idx] = orig - h
        lo = linearity_signature(net, x)
        flat[idx] = orig
        if hi == base and lo == base:
            keep.append(idx)
    return np.asarray(keep, dtype=np.int64)


def ablation_drops(net: Network, trace, layer: int, class_index: int) -> np.ndarray:
    return per_channel_score_drops(net, trace, layer, class_index).array


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
