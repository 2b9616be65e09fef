"""Reverse-mode differentiation of a class score through a recorded trace."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import ActivationTrace, Network
from .tensor import Tensor


@dataclass(frozen=True)
class GradientTrace:
    """Per-layer gradients of one pre-softmax class score.

    gradients[l] is the derivative of the score w.r.t. the output of layer l
    and has the same shape; input_gradient is the derivative w.r.t. the
    (normalized) network input.
    """

    class_index: int
    gradients: tuple[Tensor, ...]
    input_gradient: Tensor

    def gradient(self, layer: int) -> Tensor:
        if layer == -1:
            return self.input_gradient
        return self.gradients[layer]


def _check_class(net: Network, class_index: int) -> None:
    if not (0 <= class_index < net.num_classes):
        raise IndexError(f"class {class_index} out of range ({net.num_classes} classes)")


def backward(net: Network, trace: ActivationTrace, class_index: int) -> GradientTrace:
    """Exact gradients of the pre-softmax score at every layer output.

    ReLU passes gradient where its forward input was > 0 (subgradient 0 at 0);
    maxpool routes to the first row-major maximum of each window.
    """
    _check_class(net, class_index)
    n = len(net.layers)
    grads: list[np.ndarray | None] = [None] * n
    g = np.zeros(net.num_classes)
    g[class_index] = 1.0
    grads[n - 1] = g
    for l in range(n - 1, -1, -1):
        x_in = trace.activation(l - 1).array
        g = net.layers[l].vjp(x_in, grads[l])
        if l > 0:
            grads[l - 1] = g
    return GradientTrace(
        class_index=class_index,
        gradients=tuple(Tensor(arr) for arr in grads),
        input_gradient=Tensor(g),
    )


def guided_backward(net: Network, trace: ActivationTrace, class_index: int) -> Tensor:
    """Input gradient where every ReLU also masks by positive incoming gradient.

    Identical to `backward`'s input gradient on networks without ReLU layers.
    """
    _check_class(net, class_index)
    g = np.zeros(net.num_classes)
    g[class_index] = 1.0
    for l in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[l]
        x_in = trace.activation(l - 1).array
        if layer.kind == "relu":
            g = np.where((x_in > 0.0) & (g > 0.0), g, 0.0)
        else:
            g = layer.vjp(x_in, g)
    return Tensor(g)
