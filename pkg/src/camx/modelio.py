"""File formats: model manifest+blob, PNG/PPM/PGM images, heatmap rendering,
and CSV/JSON report serialization.

Model files come in pairs: `<name>.json` (the manifest) next to `<name>.bin`
(the blob). The manifest is JSON with fields

    {version, input_shape, mean, std, labels?, layers: [...]}

where each layer entry is {kind, name?, params?, offset?, count?}. Kinds and
their params:

    conv2d          {out_channels, in_channels, kernel: [kh, kw], stride, padding}
    dense           {out_features, in_features}
    maxpool         {kernel: [kh, kw], stride}
    relu, avgpool_global, flatten   (no params)

`offset` and `count` (required exactly for conv2d/dense) locate the layer's
parameters in the blob, measured in float elements: the weight array in C
order immediately followed by the bias vector. The blob itself is headerless
little-endian 32-bit floats; the declared spans must tile it exactly. Weights
are widened to 64-bit on load and narrowed back to 32-bit on save.
"""

from __future__ import annotations

import csv
import json
import struct
import zlib
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .network import ArchitectureError, LayerSpec, Network, normalize_image
from .tensor import Tensor, resize_bilinear_chw

FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    """Raised for malformed manifests or blobs (distinct from ArchitectureError,
    which covers structurally valid files describing an invalid network)."""


class ImageFormatError(ValueError):
    """Raised for unreadable or unsupported image files."""


def _require(entry: dict, key: str, context: str):
    if key not in entry:
        raise ModelFormatError(f"{context}: missing field {key!r}")
    return entry[key]


def _param_shapes(kind: str, params: dict, context: str) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """(weight shape, bias shape) declared by a parameterized layer entry."""
    if kind == "conv2d":
        c_out = int(_require(params, "out_channels", context))
        c_in = int(_require(params, "in_channels", context))
        kh, kw = (int(v) for v in _require(params, "kernel", context))
        return (c_out, c_in, kh, kw), (c_out,)
    u_out = int(_require(params, "out_features", context))
    u_in = int(_require(params, "in_features", context))
    return (u_out, u_in), (u_out,)


def _layer_from_entry(entry: dict, blob: np.ndarray, index: int) -> LayerSpec:
    context = f"layer {index}"
    if not isinstance(entry, dict):
        raise ModelFormatError(f"{context}: entry must be an object")
    kind = _require(entry, "kind", context)
    name = str(entry.get("name", ""))
    if name:
        context = f"layer {index} ({name})"
    params = entry.get("params", {})
    if kind in ("conv2d", "dense"):
        w_shape, b_shape = _param_shapes(kind, params, context)
        offset = int(_require(entry, "offset", context))
        count = int(_require(entry, "count", context))
        need = int(np.prod(w_shape)) + b_shape[0]
        if count != need:
            raise ModelFormatError(f"{context}: count {count} != declared shapes ({need} elements)")
        if offset < 0 or offset + count > blob.size:
            raise ModelFormatError(
                f"{context}: truncated blob: needs elements [{offset}, {offset + count}) "
                f"but blob holds {blob.size}"
            )
        span = blob[offset:offset + count].astype(np.float64)
        w = span[: need - b_shape[0]].reshape(w_shape)
        b = span[need - b_shape[0]:]
        if kind == "conv2d":
            return LayerSpec(
                kind=kind, name=name, weights=Tensor(w), biases=Tensor(b),
                stride=int(params.get("stride", 1)), padding=int(params.get("padding", 0)),
            )
        return LayerSpec(kind=kind, name=name, weights=Tensor(w), biases=Tensor(b))
    if "offset" in entry or "count" in entry:
        raise ModelFormatError(f"{context}: {kind} must not declare a blob span")
    if kind == "maxpool":
        kh, kw = (int(v) for v in _require(params, "kernel", context))
        return LayerSpec(kind=kind, name=name, kernel=(kh, kw), stride=int(params.get("stride", 1)))
    if kind in ("relu", "avgpool_global", "flatten"):
        return LayerSpec(kind=kind, name=name)
    raise ModelFormatError(f"{context}: unknown layer kind {kind!r}")


def blob_path_for(manifest_path: "str | Path") -> Path:
    return Path(manifest_path).with_suffix(".bin")


def load_model(path: "str | Path") -> Network:
    """Load and fully validate a manifest+blob pair; weights widened to 64-bit."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ModelFormatError(f"cannot read manifest {path}: {exc}") from exc
    try:
        manifest = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(manifest, dict):
        raise ModelFormatError(f"{path}: manifest must be a JSON object")
    version = _require(manifest, "version", str(path))
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"{path}: unsupported format version {version!r} (expected {FORMAT_VERSION})")

    bpath = blob_path_for(path)
    try:
        raw = bpath.read_bytes()
    except OSError as exc:
        raise ModelFormatError(f"cannot read blob {bpath}: {exc}") from exc
    if len(raw) % 4 != 0:
        raise ModelFormatError(f"{bpath}: blob length {len(raw)} is not a multiple of 4 bytes")
    blob = np.frombuffer(raw, dtype="<f4")

    entries = _require(manifest, "layers", str(path))
    if not isinstance(entries, list) or not entries:
        raise ModelFormatError(f"{path}: layers must be a non-empty list")
    layers = [_layer_from_entry(e, blob, i) for i, e in enumerate(entries)]

    spans = sorted(
        (int(e["offset"]), int(e["count"]), i)
        for i, e in enumerate(entries)
        if isinstance(e, dict) and "offset" in e
    )
    cursor = 0
    for offset, count, i in spans:
        if offset != cursor:
            kindword = "overlap" if offset < cursor else "gap"
            raise ModelFormatError(
                f"{path}: blob spans must tile the blob exactly; {kindword} before layer {i} "
                f"(expected offset {cursor}, got {offset})"
            )
        cursor = offset + count
    if cursor != blob.size:
        raise ModelFormatError(
            f"{path}: blob spans cover {cursor} elements but blob holds {blob.size}"
        )

    input_shape = tuple(int(v) for v in _require(manifest, "input_shape", str(path)))
    mean = tuple(float(v) for v in _require(manifest, "mean", str(path)))
    std = tuple(float(v) for v in _require(manifest, "std", str(path)))
    labels = manifest.get("labels")
    if labels is not None:
        labels = tuple(str(v) for v in labels)
    return Network(
        layers=tuple(layers),
        input_shape=input_shape,
        mean=mean,
        std=std,
        class_labels=labels,
    )


def _entry_for_layer(spec: LayerSpec, offset: int) -> tuple[dict, int]:
    entry: dict = {"kind": spec.kind}
    if spec.name:
        entry["name"] = spec.name
    if spec.kind == "conv2d":
        c_out, c_in, kh, kw = spec.weights.shape
        entry["params"] = {
            "out_channels": c_out, "in_channels": c_in,
            "kernel": [kh, kw], "stride": spec.stride, "padding": spec.padding,
        }
        count = spec.weights.size + c_out
    elif spec.kind == "dense":
        u_out, u_in = spec.weights.shape
        entry["params"] = {"out_features": u_out, "in_features": u_in}
        count = spec.weights.size + u_out
    elif spec.kind == "maxpool":
        entry["params"] = {"kernel": list(spec.kernel), "stride": spec.stride}
        return entry, offset
    else:
        return entry, offset
    entry["offset"] = offset
    entry["count"] = count
    return entry, offset + count


def save_model(net: Network, path: "str | Path") -> None:
    """Write a manifest+blob pair; weights narrowed to little-endian 32-bit."""
    path = Path(path)
    entries = []
    chunks = []
    offset = 0
    for spec in net.layers:
        entry, new_offset = _entry_for_layer(spec, offset)
        entries.append(entry)
        if new_offset != offset:
            chunks.append(spec.weights.array.astype("<f4").tobytes())
            chunks.append(spec.biases.array.astype("<f4").tobytes())
            offset = new_offset
    manifest = {
        "version": FORMAT_VERSION,
        "input_shape": list(net.input_shape),
        "mean": list(net.mean),
        "std": list(net.std),
    }
    if net.class_labels is not None:
        manifest["labels"] = list(net.class_labels)
    manifest["layers"] = entries
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    blob_path_for(path).write_bytes(b"".join(chunks))


def _read_netpbm(path: Path) -> np.ndarray:
    """Binary PPM (P6) / PGM (P5), 8-bit; returns uint8 HxW or HxWx3."""
    data = path.read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4 and pos < len(data):
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if len(fields) < 4:
        raise ImageFormatError(f"{path}: truncated header")
    magic = fields[0]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"{path}: unsupported magic {magic!r} (binary P5/P6 only)")
    try:
        width, height, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    except ValueError:
        raise ImageFormatError(f"{path}: non-numeric header fields") from None
    if maxval != 255:
        raise ImageFormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    pos += 1
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    body = data[pos:pos + need]
    if len(body) < need:
        raise ImageFormatError(f"{path}: expected {need} pixel bytes, found {len(body)}")
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(height, width, channels)
    return pixels[:, :, 0] if channels == 1 else pixels


def _read_pixels(path: Path) -> np.ndarray:
    suffix = path.suffix.lower()
    if suffix in (".ppm", ".pgm"):
        return _read_netpbm(path)
    if suffix == ".png":
        try:
            with Image.open(path) as img:
                img = img.convert("L") if img.mode in ("L", "1", "I;16") else img.convert("RGB")
                return np.asarray(img, dtype=np.uint8)
        except (OSError, ValueError) as exc:
            raise ImageFormatError(f"{path}: cannot decode PNG: {exc}") from exc
    raise ImageFormatError(f"{path}: unsupported image format {suffix!r} (PNG, PPM, PGM)")


def load_image(path: "str | Path", net: Network, allow_resize: bool = False) -> tuple[Tensor, Tensor]:
    """Load an image for a network: returns (raw, normalized) CHW tensors.

    Raw values are the 8-bit pixels scaled to [0, 1]. Grayscale files feeding a
    3-channel network are channel-replicated; a color file cannot feed a
    1-channel network. Spatial dimensions must match the network unless
    `allow_resize`, which resizes bilinearly (corner-aligned).
    """
    path = Path(path)
    if len(net.input_shape) != 3:
        raise ArchitectureError(f"network input {net.input_shape} is not an image")
    pixels = _read_pixels(path)
    chw = pixels.astype(np.float64) / 255.0
    chw = chw[None, :, :] if chw.ndim == 2 else chw.transpose(2, 0, 1)
    want_c = net.input_shape[0]
    if chw.shape[0] == 1 and want_c == 3:
        chw = np.broadcast_to(chw, (3,) + chw.shape[1:]).copy()
    elif chw.shape[0] != want_c:
        raise ImageFormatError(f"{path}: {chw.shape[0]}-channel image cannot feed a {want_c}-channel network")
    raw = Tensor(chw)
    if raw.shape[1:] != net.input_shape[1:]:
        if not allow_resize:
            raise ImageFormatError(
                f"{path}: image is {raw.shape[1]}x{raw.shape[2]} but network wants "
                f"{net.input_shape[1]}x{net.input_shape[2]} (pass the resize flag to rescale)"
            )
        raw = resize_bilinear_chw(raw, (net.input_shape[1], net.input_shape[2]))
    return raw, normalize_image(net, raw)


def _png_chunk(tag: bytes, payload: bytes) -> bytes:
    return struct.pack(">I", len(payload)) + tag + payload + struct.pack(">I", zlib.crc32(tag + payload))


def save_png(path: "str | Path", pixels: np.ndarray) -> None:
    """Minimal deterministic PNG writer: 8-bit grayscale (HxW) or RGB (HxWx3),
    filter 0, fixed compression level, no ancillary chunks."""
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
    idat = zlib.compress(rows, 6)
    Path(path).write_bytes(
        b"\x89PNG\r\n\x1a\n"
        + _png_chunk(b"IHDR", ihdr)
        + _png_chunk(b"IDAT", idat)
        + _png_chunk(b"IEND", b"")
    )


def normalize_unit(t: Tensor) -> Tensor:
    """Min-max normalize into [0, 1]; a constant map collapses to all zeros."""
    a = t.array
    lo = float(a.min())
    hi = float(a.max())
    if hi == lo:
        return Tensor(np.zeros(a.shape))
    return Tensor((a - lo) / (hi - lo))


# (position, R, G, B) breakpoints of the blue-to-red jet ramp; linear in between.
JET_BREAKPOINTS = (
    (0.0, 0, 0, 128),
    (0.125, 0, 0, 255),
    (0.375, 0, 255, 255),
    (0.625, 255, 255, 0),
    (0.875, 255, 0, 0),
    (1.0, 128, 0, 0),
)


def jet_colormap(values: np.ndarray) -> np.ndarray:
    """Map [0,1] floats to uint8 RGB via the breakpoint table."""
    pos = np.array([b[0] for b in JET_BREAKPOINTS])
    out = np.empty(values.shape + (3,), dtype=np.uint8)
    for c in range(3):
        ramp = np.array([b[1 + c] for b in JET_BREAKPOINTS], dtype=np.float64)
        out[..., c] = np.floor(np.interp(values, pos, ramp) + 0.5).astype(np.uint8)
    return out


def render_heatmap(values: Tensor, base_image: Optional[Tensor] = None, out_path: "str | Path | None" = None) -> np.ndarray:
    """Render a heatmap to uint8 pixels and optionally write a PNG.

    Values are min-max normalized first. Without a base image the output is
    grayscale; with one it is 0.5 * jet colormap + 0.5 * base, where the base
    is a raw [0,1] CHW tensor of the same spatial size.
    """
    if values.ndim != 2:
        raise ValueError(f"heatmap must be 2-D, got shape {values.shape}")
    norm = normalize_unit(values).array
    if base_image is None:
        pixels = np.floor(norm * 255.0 + 0.5).astype(np.uint8)
    else:
        if base_image.ndim != 3 or base_image.shape[0] not in (1, 3):
            raise ValueError(f"base image must be CHW with 1 or 3 channels, got {base_image.shape}")
        if base_image.shape[1:] != values.shape:
            raise ValueError(f"base image {base_image.shape[1:]} does not match heatmap {values.shape}")
        base = base_image.array
        if base.shape[0] == 1:
            base = np.broadcast_to(base, (3,) + base.shape[1:])
        base_rgb = base.transpose(1, 2, 0) * 255.0
        blended = 0.5 * jet_colormap(norm).astype(np.float64) + 0.5 * base_rgb
        pixels = np.floor(np.clip(blended, 0.0, 255.0) + 0.5).astype(np.uint8)
    if out_path is not None:
        save_png(out_path, pixels)
    return pixels


def tile_horizontal(panels: Sequence[np.ndarray], gutter: int = 4) -> np.ndarray:
    """Join equal-height uint8 RGB panels left to right with a white gutter."""
    if not panels:
        raise ValueError("no panels to tile")
    rgb = []
    for p in panels:
        p = np.asarray(p, dtype=np.uint8)
        if p.ndim == 2:
            p = np.repeat(p[:, :, None], 3, axis=2)
        rgb.append(p)
    height = rgb[0].shape[0]
    if any(p.shape[0] != height for p in rgb):
        raise ValueError("panels must share a height")
    spacer = np.full((height, gutter, 3), 255, dtype=np.uint8)
    parts = []
    for i, p in enumerate(rgb):
        if i:
            parts.append(spacer)
        parts.append(p)
    return np.concatenate(parts, axis=1)


def tile_vertical(panels: Sequence[np.ndarray], gutter: int = 4) -> np.ndarray:
    """Join equal-width uint8 RGB panels top to bottom with a white gutter."""
    if not panels:
        raise ValueError("no panels to tile")
    rgb = []
    for p in panels:
        p = np.asarray(p, dtype=np.uint8)
        if p.ndim == 2:
            p = np.repeat(p[:, :, None], 3, axis=2)
        rgb.append(p)
    width = rgb[0].shape[1]
    if any(p.shape[1] != width for p in rgb):
        raise ValueError("panels must share a width")
    spacer = np.full((gutter, width, 3), 255, dtype=np.uint8)
    parts = []
    for i, p in enumerate(rgb):
        if i:
            parts.append(spacer)
        parts.append(p)
    return np.concatenate(parts, axis=0)


def write_csv(path: "str | Path", fieldnames: Sequence[str], rows: Sequence[dict]) -> None:
    """CSV report with a fixed column order and unix newlines."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fieldnames), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def write_json(path: "str | Path", payload) -> None:
    """JSON report with sorted keys so identical data gives identical bytes."""
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
