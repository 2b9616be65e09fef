"""Torch-to-engine model exporter: checkpoint bundles to manifest+blob files
plus image fixtures with framework-computed logits."""

from .export import (
    ExportResult,
    UnsupportedLayerError,
    build_module,
    export,
    export_module,
    layer_entries,
    write_model,
)

__version__ = "1.0.0"

__all__ = [
    "ExportResult",
    "UnsupportedLayerError",
    "build_module",
    "export",
    "export_module",
    "layer_entries",
    "write_model",
]
