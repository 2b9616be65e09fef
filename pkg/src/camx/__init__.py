"""camx: class-activation explanations for small ReLU CNNs, with built-in
verification of the sensitivity and conservation properties the maps are
supposed to satisfy."""

__version__ = "1.0.0"

from .autodiff import GradientTrace, backward, guided_backward
from .axioms import (
    AxiomReport,
    DecompositionCheck,
    axiom_report,
    bias_accumulation,
    conservation_residual,
    decomposition_check,
    evaluate_phi,
    layer_diagnostics,
    sensitivity_residual,
    zeta_per_channel,
)
from .cam import CamMethod, CamResult, compute_cam, guided_fuse, per_channel_score_drops
from .modelio import ImageFormatError, ModelFormatError, load_image, load_model, render_heatmap, save_model
from .network import (
    ActivationTrace,
    ArchitectureError,
    LayerSpec,
    Network,
    forward,
    normalize_image,
    softmax_confidence,
)
from .perturb import MaskResult, PerturbationResult, build_mask, confidence_drop, perturb_image
from .tensor import ShapeMismatchError, Tensor

__all__ = [
    "ActivationTrace",
    "ArchitectureError",
    "AxiomReport",
    "CamMethod",
    "CamResult",
    "DecompositionCheck",
    "GradientTrace",
    "ImageFormatError",
    "LayerSpec",
    "MaskResult",
    "ModelFormatError",
    "Network",
    "PerturbationResult",
    "ShapeMismatchError",
    "Tensor",
    "axiom_report",
    "backward",
    "bias_accumulation",
    "build_mask",
    "compute_cam",
    "confidence_drop",
    "conservation_residual",
    "decomposition_check",
    "evaluate_phi",
    "forward",
    "guided_backward",
    "guided_fuse",
    "layer_diagnostics",
    "load_image",
    "load_model",
    "normalize_image",
    "per_channel_score_drops",
    "perturb_image",
    "render_heatmap",
    "save_model",
    "sensitivity_residual",
    "softmax_confidence",
    "zeta_per_channel",
]
