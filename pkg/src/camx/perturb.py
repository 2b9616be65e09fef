"""Occlusion-based evaluation: threshold a heatmap into a binary mask, blend
the masked region toward the dataset mean in raw pixel space, and measure the
resulting confidence drop."""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .network import ArchitectureError, Network, forward, normalize_image, softmax_confidence
from .tensor import Tensor


@dataclass(frozen=True)
class MaskResult:
    """Binary occlusion mask plus how it was derived.

    `degenerate` marks constant heatmaps, where the percentile rule has no
    information to act on: an all-zero map yields an empty mask, a constant
    positive map masks everything.
    """

    mask: Tensor
    threshold: float
    coverage: float
    degenerate: bool


def build_mask(heatmap: Tensor, percentile: float = 80.0) -> MaskResult:
    """Mask of pixels whose min-max-normalized intensity reaches the given
    percentile of the normalized map."""
    if heatmap.ndim != 2:
        raise ValueError(f"heatmap must be 2-D, got shape {heatmap.shape}")
    if not (0.0 <= percentile <= 100.0):
        raise ValueError(f"percentile must be in [0, 100], got {percentile}")
    h = heatmap.array
    lo = float(h.min())
    hi = float(h.max())
    if hi == lo:
        full = hi > 0.0
        mask = np.full(h.shape, 1.0 if full else 0.0)
        return MaskResult(mask=Tensor(mask), threshold=0.0, coverage=1.0 if full else 0.0, degenerate=True)
    norm = (h - lo) / (hi - lo)
    threshold = float(np.percentile(norm, percentile, method="linear"))
    mask = (norm >= threshold).astype(np.float64)
    return MaskResult(
        mask=Tensor(mask),
        threshold=threshold,
        coverage=float(mask.mean()),
        degenerate=False,
    )


def random_mask(height: int, width: int, coverage: float, seed: int) -> MaskResult:
    """Control mask with the same pixel count placed uniformly at random."""
    if not (0.0 <= coverage <= 1.0):
        raise ValueError(f"coverage must be in [0, 1], got {coverage}")
    count = int(round(coverage * height * width))
    flat = np.zeros(height * width)
    order = np.random.default_rng(seed).permutation(height * width)
    flat[order[:count]] = 1.0
    return MaskResult(
        mask=Tensor(flat.reshape(height, width)),
        threshold=0.0,
        coverage=count / (height * width),
        degenerate=False,
    )


def stable_seed(text: str) -> int:
    """Deterministic 32-bit seed from a string (used to key random masks by filename)."""
    return zlib.crc32(text.encode("utf-8"))


def perturb_image(image: Tensor, mask: Tensor, mean: tuple[float, ...]) -> Tensor:
    """Blend masked pixels toward the per-channel dataset mean, in raw pixel space."""
    if image.ndim != 3:
        raise ValueError(f"image must be CHW, got shape {image.shape}")
    if mask.ndim != 2 or mask.shape != image.shape[1:]:
        raise ValueError(f"mask shape {mask.shape} does not match image spatial dims {image.shape[1:]}")
    m = mask.array
    if m.min() < 0.0 or m.max() > 1.0:
        raise ValueError("mask values must lie in [0, 1]")
    if len(mean) not in (1, image.shape[0]):
        raise ValueError(f"mean must have 1 or {image.shape[0]} entries, got {len(mean)}")
    mu = np.asarray(mean, dtype=np.float64).reshape(-1, 1, 1)
    return Tensor(image.array * (1.0 - m) + mu * m)


@dataclass(frozen=True)
class PerturbationResult:
    """Confidence change caused by occluding a heatmap's top-percentile region."""

    class_index: int
    confidence_original: float
    confidence_perturbed: float
    drop: float
    threshold: float
    coverage: float
    degenerate: bool


def confidence_drop(
    net: Network,
    raw_image: Tensor,
    heatmap: Tensor | None,
    class_index: Optional[int] = None,
    percentile: float = 80.0,
    mask: MaskResult | None = None,
) -> PerturbationResult:
    """Relative drop in softmax confidence after occlusion.

    Pass either a heatmap (thresholded here) or a prebuilt mask. The class
    defaults to the unperturbed top-1 prediction.
    """
    if (heatmap is None) == (mask is None):
        raise ValueError("pass exactly one of heatmap or mask")
    if mask is None:
        if heatmap.shape != raw_image.shape[1:]:
            raise ArchitectureError(
                f"heatmap shape {heatmap.shape} does not match image spatial dims {raw_image.shape[1:]}"
            )
        mask = build_mask(heatmap, percentile)
    trace = forward(net, normalize_image(net, raw_image))
    if class_index is None:
        class_index = int(np.argmax(trace.scores.array))
    perturbed = perturb_image(raw_image, mask.mask, net.mean)
    trace_pert = forward(net, normalize_image(net, perturbed))
    p0 = softmax_confidence(trace.scores, class_index)
    p1 = softmax_confidence(trace_pert.scores, class_index)
    return PerturbationResult(
        class_index=class_index,
        confidence_original=p0,
        confidence_perturbed=p1,
        drop=(p0 - p1) / p0,
        threshold=mask.threshold,
        coverage=mask.coverage,
        degenerate=mask.degenerate,
    )
