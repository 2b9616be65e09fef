"""Axiom instrumentation: score decomposition, sensitivity/conservation
residuals, per-channel gradient-shift terms, and the combined objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .autodiff import GradientTrace, backward
from .cam import (
    CamMethod,
    per_channel_score_drops,
    weights_ablation_cam,
    weights_cam_gap,
    weights_grad_cam,
    weights_grad_cam_pp,
    weights_xgrad_cam,
)
from .network import ActivationTrace, ArchitectureError, Network
from .tensor import Tensor


@dataclass(frozen=True)
class DecompositionCheck:
    """Both sides of the score-decomposition identity at one layer.

    The class score must equal the gradient*activation sum plus a bias term;
    the bias term is computed two independent ways (score residual vs explicit
    gradient*bias accumulation over the layers above) so they can be
    cross-checked.
    """

    layer: int
    score: float
    gradient_feature_sum: float
    epsilon_residual: float
    epsilon_bias_traced: float

    @property
    def identity_residual(self) -> float:
        """|S - sum - eps_traced| / max(|S|, 1e-12)."""
        err = abs(self.score - self.gradient_feature_sum - self.epsilon_bias_traced)
        return err / max(abs(self.score), 1e-12)


def bias_accumulation(net: Network, gradients: GradientTrace, layer: int) -> float:
    """Sum over layers above `layer` of gradient-at-unit times unit bias."""
    total = 0.0
    for t in range(layer + 1, len(net.layers)):
        total += net.layers[t].bias_dot(gradients.gradients[t].array)
    return total


def decomposition_check(
    net: Network, trace: ActivationTrace, gradients: GradientTrace, layer: int
) -> DecompositionCheck:
    """Evaluate the decomposition identity at one layer (any rank)."""
    if not (0 <= layer < len(net.layers)):
        raise ArchitectureError(f"layer {layer} out of range")
    score = float(trace.scores.array[gradients.class_index])
    lhs = float(np.vdot(gradients.gradients[layer].array, trace.outputs[layer].array))
    return DecompositionCheck(
        layer=layer,
        score=score,
        gradient_feature_sum=lhs,
        epsilon_residual=score - lhs,
        epsilon_bias_traced=bias_accumulation(net, gradients, layer),
    )


def _channel_sums(trace: ActivationTrace, layer: int) -> np.ndarray:
    act = trace.outputs[layer]
    if act.ndim != 3:
        raise ArchitectureError(f"layer {layer} is not spatial (shape {act.shape})")
    return act.array.sum(axis=(1, 2))


def sensitivity_residual(
    net: Network,
    trace: ActivationTrace,
    weights: Tensor,
    layer: int,
    class_index: int,
    score_drops: Tensor | None = None,
) -> Optional[float]:
    """Normalized deviation from per-channel sensitivity; None when every
    ablation leaves the score unchanged (undefined ratio, excluded from means)."""
    if score_drops is None:
        score_drops = per_channel_score_drops(net, trace, layer, class_index)
    drops = score_drops.array
    attributed = weights.array * _channel_sums(trace, layer)
    denom = np.abs(drops).sum()
    if denom == 0.0:
        return None
    return float(np.abs(drops - attributed).sum() / denom)


def conservation_residual(
    trace: ActivationTrace, weights: Tensor, layer: int, score: float
) -> Optional[float]:
    """Normalized deviation of the total attributed mass from the class score."""
    if score == 0.0:
        return None
    total = float(weights.array @ _channel_sums(trace, layer))
    return float(abs(score - total) / abs(score))


def evaluate_phi(
    net: Network,
    trace: ActivationTrace,
    weights: Tensor,
    layer: int,
    class_index: int,
    score_drops: Tensor | None = None,
) -> float:
    """Un-normalized sensitivity + conservation objective for a weight vector."""
    if score_drops is None:
        score_drops = per_channel_score_drops(net, trace, layer, class_index)
    drops = score_drops.array
    attributed = weights.array * _channel_sums(trace, layer)
    score = float(trace.scores.array[class_index])
    return float(np.abs(drops - attributed).sum() + abs(score - attributed.sum()))


def _ablated_trace(net: Network, trace: ActivationTrace, layer: int, channel: int) -> ActivationTrace:
    """Trace of the network with one channel of layer `layer` forced to zero.

    Outputs below `layer` are reused; only gradients at or above `layer` of the
    resulting trace are meaningful for the ablated network.
    """
    ablated = trace.outputs[layer].array.copy()
    ablated[channel] = 0.0
    outputs = list(trace.outputs[:layer])
    x = ablated
    outputs.append(Tensor(x))
    for spec in net.layers[layer + 1:]:
        x = spec.apply(x)
        outputs.append(Tensor(x))
    return ActivationTrace(input=trace.input, outputs=tuple(outputs))


def zeta_per_channel(
    net: Network, trace: ActivationTrace, gradients: GradientTrace, layer: int
) -> Tensor:
    """Cross-channel gradient-shift term of each channel's ablation.

    zeta_k sums, over the other channels, the change in gradient*activation
    caused by zeroing channel k, plus the change in the bias term. Costs one
    ablated forward and backward per channel.
    """
    feats = trace.outputs[layer]
    if feats.ndim != 3:
        raise ArchitectureError(f"layer {layer} is not spatial (shape {feats.shape})")
    f = feats.array
    g = gradients.gradients[layer].array
    eps = bias_accumulation(net, gradients, layer)
    c = gradients.class_index
    out = np.empty(f.shape[0])
    for k in range(f.shape[0]):
        abl_trace = _ablated_trace(net, trace, layer, k)
        abl_grads = backward(net, abl_trace, c)
        g_abl = abl_grads.gradients[layer].array
        dots = ((g - g_abl) * f).sum(axis=(1, 2))
        eps_abl = bias_accumulation(net, abl_grads, layer)
        out[k] = dots.sum() - dots[k] + eps - eps_abl
    return Tensor(out)


@dataclass(frozen=True)
class AxiomReport:
    """Axiom metrics for one (image, method, layer, class) combination."""

    method: CamMethod
    layer: int
    class_index: int
    score: float
    sensitivity_residual: Optional[float]
    conservation_residual: Optional[float]
    epsilon: float
    epsilon_normalized: Optional[float]
    phi: float
    per_channel_score_drop: tuple[float, ...]
    zeta_per_channel: Optional[tuple[float, ...]] = None


def method_weights(
    net: Network,
    trace: ActivationTrace,
    method: CamMethod,
    layer: int,
    class_index: int,
    gradients: GradientTrace | None = None,
    score_drops: Tensor | None = None,
) -> Tensor:
    """Weight vector of any method, reusing precomputed gradients/drops."""
    if method is CamMethod.CAM_GAP:
        return weights_cam_gap(net, layer, class_index)
    if method is CamMethod.ABLATION_CAM:
        return weights_ablation_cam(net, trace, layer, class_index, score_drops)
    if gradients is None or gradients.class_index != class_index:
        gradients = backward(net, trace, class_index)
    if method is CamMethod.GRAD_CAM:
        return weights_grad_cam(trace, gradients, layer)
    if method is CamMethod.XGRAD_CAM:
        return weights_xgrad_cam(trace, gradients, layer)
    if method is CamMethod.GRAD_CAM_PP:
        return weights_grad_cam_pp(trace, gradients, layer)
    raise ValueError(f"unknown method {method}")


def axiom_report(
    net: Network,
    trace: ActivationTrace,
    method: CamMethod,
    layer: int,
    class_index: int,
    gradients: GradientTrace | None = None,
    score_drops: Tensor | None = None,
    include_zeta: bool = False,
) -> AxiomReport:
    """Full per-image report; pass shared gradients/drops when looping methods."""
    if gradients is None or gradients.class_index != class_index:
        gradients = backward(net, trace, class_index)
    if score_drops is None:
        score_drops = per_channel_score_drops(net, trace, layer, class_index)
    weights = method_weights(net, trace, method, layer, class_index, gradients, score_drops)
    score = float(trace.scores.array[class_index])
    eps = bias_accumulation(net, gradients, layer)
    zeta = None
    if include_zeta:
        zeta = tuple(zeta_per_channel(net, trace, gradients, layer).array.tolist())
    return AxiomReport(
        method=method,
        layer=layer,
        class_index=class_index,
        score=score,
        sensitivity_residual=sensitivity_residual(net, trace, weights, layer, class_index, score_drops),
        conservation_residual=conservation_residual(trace, weights, layer, score),
        epsilon=eps,
        epsilon_normalized=abs(eps / score) if score != 0.0 else None,
        phi=evaluate_phi(net, trace, weights, layer, class_index, score_drops),
        per_channel_score_drop=tuple(score_drops.array.tolist()),
        zeta_per_channel=zeta,
    )


def mean_defined(values: Sequence[Optional[float]]) -> tuple[Optional[float], int]:
    """Arithmetic mean over defined entries; returns (mean, excluded count)."""
    kept = [v for v in values if v is not None]
    excluded = len(values) - len(kept)
    if not kept:
        return None, excluded
    return float(np.mean(kept)), excluded


@dataclass(frozen=True)
class LayerDiagnostics:
    """Corpus statistics of the normalized bias and gradient-shift terms."""

    layer: int
    name: str
    epsilon_ratio_mean: Optional[float]
    epsilon_ratio_quartiles: tuple[float, float, float] | None
    excluded: int
    zeta_ratio_mean: Optional[float] = None
    zeta_ratio_quartiles: tuple[float, float, float] | None = None
    zeta_excluded: int = 0


def _quartiles(values: list[float]) -> tuple[float, float, float]:
    q = np.percentile(values, [25.0, 50.0, 75.0], method="linear")
    return (float(q[0]), float(q[1]), float(q[2]))


def layer_diagnostics(
    net: Network,
    traces: Sequence[ActivationTrace],
    include_zeta: bool = False,
) -> list[LayerDiagnostics]:
    """Per spatial layer, corpus stats of |eps/S_c| (and the zeta ratio when
    requested; that one costs channel-count ablated passes per image and layer).
    Class of interest is each image's top-1 prediction."""
    if not traces:
        raise ValueError("empty corpus")
    layers = net.spatial_layers()
    eps_ratios: dict[int, list[Optional[float]]] = {l: [] for l in layers}
    zeta_ratios: dict[int, list[Optional[float]]] = {l: [] for l in layers}
    for trace in traces:
        c = int(np.argmax(trace.scores.array))
        grads = backward(net, trace, c)
        score = float(trace.scores.array[c])
        for l in layers:
            eps = bias_accumulation(net, grads, l)
            eps_ratios[l].append(abs(eps / score) if score != 0.0 else None)
            if include_zeta:
                zeta = zeta_per_channel(net, trace, grads, l).array
                drops = per_channel_score_drops(net, trace, l, c).array
                denom = np.abs(drops).sum()
                zeta_ratios[l].append(float(np.abs(zeta).sum() / denom) if denom != 0.0 else None)
    out = []
    for l in layers:
        eps_mean, eps_excl = mean_defined(eps_ratios[l])
        kept = [v for v in eps_ratios[l] if v is not None]
        diag = dict(
            layer=l,
            name=net.layers[l].label,
            epsilon_ratio_mean=eps_mean,
            epsilon_ratio_quartiles=_quartiles(kept) if kept else None,
            excluded=eps_excl,
        )
        if include_zeta:
            z_mean, z_excl = mean_defined(zeta_ratios[l])
            z_kept = [v for v in zeta_ratios[l] if v is not None]
            diag.update(
                zeta_ratio_mean=z_mean,
                zeta_ratio_quartiles=_quartiles(z_kept) if z_kept else None,
                zeta_excluded=z_excl,
            )
        out.append(LayerDiagnostics(**diag))
    return out
