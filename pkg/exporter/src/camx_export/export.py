"""Convert a torch CNN into the engine's manifest+blob model format.

The supported layer set mirrors the engine exactly: Conv2d, ReLU, MaxPool2d,
AdaptiveAvgPool2d(1), Flatten, Linear. Anything else is rejected by name.
The manifest layout matches the engine's writer byte for byte: JSON with
fields {version, input_shape, mean, std, labels?, layers}, each
parameterized layer carrying an (offset, count) span into a headerless
little-endian float32 blob holding weights then biases in layer order.

A checkpoint bundle (produced by the training recipe, see recipe.py) is a
torch-saved dict:

    {
      "format": "camx-export-bundle",
      "layout": ((kind, params), ...),   architecture description
      "state": state_dict,
      "input_shape": [C, H, W],
      "mean": [...], "std": [...],
      "labels": [...],                   optional
      "fixture_images": uint8 (N, H, W, C) raw pixels
    }

`export(checkpoint, out_dir)` writes model.json + model.bin, one PNG per
fixture image, and fixtures.json recording each image's logits to six
decimal places, computed by the framework in float64 on the exported
float32 weights.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

FORMAT_VERSION = 1
LOGIT_DECIMALS = 6


class UnsupportedLayerError(ValueError):
    """Raised when a checkpoint layer falls outside the exportable set."""


def _pair(value) -> tuple[int, int]:
    if isinstance(value, (tuple, list)):
        return int(value[0]), int(value[1])
    return int(value), int(value)


def _square(value, what: str, module: str) -> int:
    a, b = _pair(value)
    if a != b:
        raise UnsupportedLayerError(f"{module}: only square {what} is exportable, got ({a}, {b})")
    return a


def _flatten_children(module: nn.Module):
    for child in module.children():
        if isinstance(child, nn.Sequential):
            yield from _flatten_children(child)
        else:
            yield child


def _weight_bias(module, out_dim: int) -> tuple[np.ndarray, np.ndarray]:
    w = module.weight.detach().cpu().numpy().astype("<f4")
    if module.bias is None:
        b = np.zeros(out_dim, dtype="<f4")
    else:
        b = module.bias.detach().cpu().numpy().astype("<f4")
    return w, b


def layer_entries(model: nn.Module) -> tuple[list[dict], list[bytes]]:
    """Manifest layer entries plus blob chunks for a flat torch module.

    Walks the module's children (nested Sequentials are flattened), mapping
    each to an engine layer kind and rejecting anything unsupported by its
    torch class name.
    """
    entries: list[dict] = []
    chunks: list[bytes] = []
    counters: dict[str, int] = {}
    offset = 0
    for position, module in enumerate(_flatten_children(model)):
        where = f"layer {position} ({type(module).__name__})"
        if isinstance(module, nn.Conv2d):
            if module.groups != 1:
                raise UnsupportedLayerError(f"{where}: grouped convolution is not exportable")
            if _pair(module.dilation) != (1, 1):
                raise UnsupportedLayerError(f"{where}: dilation is not exportable")
            if module.padding_mode != "zeros":
                raise UnsupportedLayerError(f"{where}: padding mode {module.padding_mode!r} is not exportable")
            kh, kw = _pair(module.kernel_size)
            stride = _square(module.stride, "stride", where)
            padding = _square(module.padding, "padding", where)
            kind, params = "conv2d", {
                "out_channels": module.out_channels,
                "in_channels": module.in_channels,
                "kernel": [kh, kw],
                "stride": stride,
                "padding": padding,
            }
            w, b = _weight_bias(module, module.out_channels)
        elif isinstance(module, nn.ReLU):
            kind, params, w = "relu", None, None
        elif isinstance(module, nn.MaxPool2d):
            if _pair(module.padding) != (0, 0):
                raise UnsupportedLayerError(f"{where}: padded pooling is not exportable")
            if _pair(module.dilation) != (1, 1):
                raise UnsupportedLayerError(f"{where}: dilation is not exportable")
            if module.ceil_mode:
                raise UnsupportedLayerError(f"{where}: ceil_mode pooling is not exportable")
            kh, kw = _pair(module.kernel_size)
            kind, params, w = "maxpool", {"kernel": [kh, kw], "stride": _square(module.stride, "stride", where)}, None
        elif isinstance(module, nn.AdaptiveAvgPool2d):
            if _pair(module.output_size) != (1, 1):
                raise UnsupportedLayerError(f"{where}: only global (1x1) average pooling is exportable")
            kind, params, w = "avgpool_global", None, None
        elif isinstance(module, nn.Flatten):
            if module.start_dim != 1 or module.end_dim != -1:
                raise UnsupportedLayerError(f"{where}: partial flatten is not exportable")
            kind, params, w = "flatten", None, None
        elif isinstance(module, nn.Linear):
            kind, params = "dense", {"out_features": module.out_features, "in_features": module.in_features}
            w, b = _weight_bias(module, module.out_features)
        else:
            raise UnsupportedLayerError(f"{where}: unsupported layer kind")

        prefix = {"conv2d": "conv", "relu": "relu", "maxpool": "pool",
                  "avgpool_global": "gap", "flatten": "flat", "dense": "fc"}[kind]
        index = counters.get(prefix, 0)
        counters[prefix] = index + 1
        entry: dict = {"kind": kind, "name": f"{prefix}{index}"}
        if params is not None:
            entry["params"] = params
        if w is not None:
            count = w.size + b.size
            entry["offset"] = offset
            entry["count"] = count
            offset += count
            chunks.append(np.ascontiguousarray(w).tobytes())
            chunks.append(np.ascontiguousarray(b).tobytes())
        entries.append(entry)
    if not entries:
        raise UnsupportedLayerError("model has no layers to export")
    return entries, chunks


def write_model(
    path: Path,
    entries: list[dict],
    chunks: list[bytes],
    input_shape,
    mean,
    std,
    labels=None,
) -> None:
    """Write the manifest next to its .bin blob, matching the engine's layout."""
    manifest: dict = {
        "version": FORMAT_VERSION,
        "input_shape": [int(v) for v in input_shape],
        "mean": [float(v) for v in mean],
        "std": [float(v) for v in std],
    }
    if labels is not None:
        manifest["labels"] = [str(v) for v in labels]
    manifest["layers"] = entries
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    path.with_suffix(".bin").write_bytes(b"".join(chunks))


def _png_chunk(tag: bytes, payload: bytes) -> bytes:
    return struct.pack(">I", len(payload)) + tag + payload + struct.pack(">I", zlib.crc32(tag + payload))


def save_png(path: Path, pixels: np.ndarray) -> None:
    """Deterministic 8-bit PNG: filter 0, fixed compression, no extras."""
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    if pixels.ndim == 2:
        color_type = 0
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        color_type = 2
    else:
        raise ValueError(f"pixels must be HxW or HxWx3 uint8, got shape {pixels.shape}")
    height, width = pixels.shape[:2]
    ihdr = struct.pack(">IIBBBBB", width, height, 8, color_type, 0, 0, 0)
    rows = b"".join(b"\x00" + pixels[y].tobytes() for y in range(height))
    Path(path).write_bytes(
        b"\x89PNG\r\n\x1a\n"
        + _png_chunk(b"IHDR", ihdr)
        + _png_chunk(b"IDAT", zlib.compress(rows, 6))
        + _png_chunk(b"IEND", b"")
    )


def reference_logits(model: nn.Module, image: np.ndarray, mean, std) -> np.ndarray:
    """Framework-computed logits for one raw uint8 HWC image, in float64."""
    chw = image.astype(np.float64).transpose(2, 0, 1) / 255.0
    mean = np.asarray(mean, dtype=np.float64).reshape(-1, 1, 1)
    std = np.asarray(std, dtype=np.float64).reshape(-1, 1, 1)
    x = torch.from_numpy((chw - mean) / std).unsqueeze(0)
    with torch.no_grad():
        return model(x)[0].numpy()


@dataclass(frozen=True)
class ExportResult:
    manifest_path: Path
    blob_path: Path
    fixtures_path: Path
    fixture_image_paths: tuple[Path, ...]


def export_module(
    model: nn.Module,
    out_dir: "str | Path",
    input_shape,
    mean,
    std,
    labels=None,
    fixture_images: "np.ndarray | None" = None,
    model_name: str = "model",
) -> ExportResult:
    """Export a torch module plus optional fixture images to out_dir.

    Weights are serialized as float32 exactly as stored; fixture logits are
    computed by torch in float64 on those same weights, so an engine forward
    pass on the exported file has a well-conditioned target to match.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries, chunks = layer_entries(model)
    manifest_path = out_dir / f"{model_name}.json"
    write_model(manifest_path, entries, chunks, input_shape, mean, std, labels)

    image_paths: list[Path] = []
    fixtures: list[dict] = []
    if fixture_images is not None and len(fixture_images):
        oracle = _rebuild_double(model)
        fix_dir = out_dir / "fixtures"
        fix_dir.mkdir(exist_ok=True)
        for i, image in enumerate(np.asarray(fixture_images, dtype=np.uint8)):
            name = f"fixture_{i:02d}.png"
            save_png(fix_dir / name, image)
            image_paths.append(fix_dir / name)
            logits = reference_logits(oracle, image, mean, std)
            fixtures.append({
                "image": f"fixtures/{name}",
                "logits": [round(float(v), LOGIT_DECIMALS) for v in logits],
            })
    fixtures_path = out_dir / "fixtures.json"
    fixtures_path.write_text(
        json.dumps({"fixtures": fixtures}, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return ExportResult(
        manifest_path=manifest_path,
        blob_path=manifest_path.with_suffix(".bin"),
        fixtures_path=fixtures_path,
        fixture_image_paths=tuple(image_paths),
    )


def _rebuild_double(model: nn.Module) -> nn.Module:
    """Float64 copy for the logit oracle; the original stays float32."""
    import copy

    clone = copy.deepcopy(model)
    clone.double()
    clone.eval()
    return clone


def build_module(layout) -> nn.Sequential:
    """Torch module from a bundle's layout description."""
    modules: list[nn.Module] = []
    for kind, params in layout:
        if kind == "conv2d":
            modules.append(nn.Conv2d(params["in"], params["out"], params["kernel"],
                                     stride=params.get("stride", 1), padding=params.get("padding", 0)))
        elif kind == "relu":
            modules.append(nn.ReLU())
        elif kind == "maxpool":
            modules.append(nn.MaxPool2d(params["kernel"], stride=params.get("stride", params["kernel"])))
        elif kind == "avgpool_global":
            modules.append(nn.AdaptiveAvgPool2d(1))
        elif kind == "flatten":
            modules.append(nn.Flatten())
        elif kind == "dense":
            modules.append(nn.Linear(params["in"], params["out"]))
        else:
            raise UnsupportedLayerError(f"layout kind {kind!r} is not buildable")
    return nn.Sequential(*modules)


def export(checkpoint_path: "str | Path", out_dir: "str | Path") -> ExportResult:
    """Export a training-recipe checkpoint bundle. See the module docstring."""
    bundle = torch.load(checkpoint_path, map_location="cpu", weights_only=False)
    if not isinstance(bundle, dict) or bundle.get("format") != "camx-export-bundle":
        raise ValueError(f"{checkpoint_path}: not a camx-export checkpoint bundle")
    model = build_module(bundle["layout"])
    model.load_state_dict(bundle["state"])
    model.eval()
    return export_module(
        model,
        out_dir,
        input_shape=bundle["input_shape"],
        mean=bundle["mean"],
        std=bundle["std"],
        labels=bundle.get("labels"),
        fixture_images=bundle.get("fixture_images"),
    )
