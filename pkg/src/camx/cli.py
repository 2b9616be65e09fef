"""Command-line surface: visualize, compare, axioms, perturb, check-identity.

Exit codes: 0 success, 1 usage error, 2 validation failure (bad files, layers,
classes, architectures), 3 identity-check failure.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .autodiff import GradientTrace, backward, guided_backward
from .axioms import AxiomReport, axiom_report, decomposition_check, mean_defined
from .cam import CamMethod, compute_cam, guided_fuse, per_channel_score_drops, weights_cam_gap
from .modelio import (
    ImageFormatError,
    ModelFormatError,
    load_image,
    load_model,
    normalize_unit,
    render_heatmap,
    save_png,
    tile_horizontal,
    tile_vertical,
    write_csv,
    write_json,
)
from .network import ArchitectureError, Network, forward, softmax_confidence
from .perturb import build_mask, confidence_drop, perturb_image, random_mask, stable_seed
from .runtime import parallel_map, thread_count
from .tensor import ShapeMismatchError, Tensor

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_IDENTITY = 3

IDENTITY_TOLERANCE = 1e-6

METHOD_NAMES = {
    "grad": CamMethod.GRAD_CAM,
    "gradpp": CamMethod.GRAD_CAM_PP,
    "ablation": CamMethod.ABLATION_CAM,
    "xgrad": CamMethod.XGRAD_CAM,
    "cam": CamMethod.CAM_GAP,
}
# Occlusion controls: same masking pipeline fed by a non-informative map.
PSEUDO_METHODS = ("random", "zero")

IMAGE_SUFFIXES = (".png", ".ppm", ".pgm")


class _Parser(argparse.ArgumentParser):
    """argparse maps flag errors to exit 2 by default; this surface uses 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _parse_methods(text: str, allow_pseudo: bool = False) -> list[str]:
    names = [n.strip() for n in text.split(",") if n.strip()]
    if not names:
        raise ValueError("empty method list")
    valid = set(METHOD_NAMES) | (set(PSEUDO_METHODS) if allow_pseudo else set())
    for n in names:
        if n not in valid:
            raise ValueError(f"unknown method {n!r} (choose from {', '.join(sorted(valid))})")
    return names


def _resolve_layer(net: Network, ref: Optional[str]) -> int:
    if ref is None:
        return net.last_spatial_layer()
    return net.layer_index(ref)


def _resolve_class(net: Network, value: str, trace) -> int:
    if value == "auto":
        return int(np.argmax(trace.scores.array))
    try:
        c = int(value)
    except ValueError:
        raise ValueError(f"class must be an integer or 'auto', got {value!r}") from None
    if not (0 <= c < net.num_classes):
        raise ValueError(f"class {c} out of range (network has {net.num_classes} classes)")
    return c


def _class_label(net: Network, c: int) -> str:
    if net.class_labels is not None and c < len(net.class_labels):
        return net.class_labels[c]
    return str(c)


def _corpus_files(directory: str) -> list[Path]:
    root = Path(directory)
    if not root.is_dir():
        raise ValueError(f"not a directory: {directory}")
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ValueError(f"empty corpus: no {'/'.join(IMAGE_SUFFIXES)} files in {directory}")
    return files


def _render_signed_chw(t: Tensor) -> np.ndarray:
    """Min-max normalize a CHW map (guided fusion output) to uint8 pixels."""
    norm = normalize_unit(t).array
    pixels = np.floor(norm * 255.0 + 0.5).astype(np.uint8)
    return pixels[0] if pixels.shape[0] == 1 else pixels.transpose(1, 2, 0)


def _guided_out_path(out: str) -> Path:
    p = Path(out)
    return p.with_name(p.stem + "_guided" + (p.suffix or ".png"))


def cmd_visualize(args) -> int:
    net = load_model(args.model)
    raw, norm = load_image(args.image, net, allow_resize=args.resize)
    trace = forward(net, norm)
    layer = _resolve_layer(net, args.layer)
    class_index = _resolve_class(net, args.class_index, trace)
    method = METHOD_NAMES[args.method]
    start = time.perf_counter()
    result = compute_cam(net, trace, method, layer, class_index, threads=thread_count())
    elapsed = time.perf_counter() - start
    score = float(trace.scores.array[class_index])
    print(f"class {class_index} ({_class_label(net, class_index)}) score {score:.6f}")
    print(f"{args.method}: {elapsed:.4f}s")
    render_heatmap(result.heatmap, raw if args.overlay else None, args.out)
    print(f"wrote {args.out}")
    if args.guided:
        guided = guided_backward(net, trace, class_index)
        fused = guided_fuse(result, guided)
        gpath = _guided_out_path(args.out)
        save_png(gpath, _render_signed_chw(fused))
        print(f"wrote {gpath}")
    return EXIT_OK


def cmd_compare(args) -> int:
    net = load_model(args.model)
    raw, norm = load_image(args.image, net, allow_resize=args.resize)
    trace = forward(net, norm)
    layer = _resolve_layer(net, args.layer)
    methods = _parse_methods(args.methods)
    classes = []
    for part in args.classes.split(","):
        part = part.strip()
        if part:
            classes.append(_resolve_class(net, part, trace))
    if not classes:
        raise ValueError("no classes given")
    shared_grads: dict[int, GradientTrace] = {}
    shared_drops: dict[int, Tensor] = {}
    rows = []
    for name in methods:
        method = METHOD_NAMES[name]
        panels = []
        for c in classes:
            if method not in (CamMethod.CAM_GAP, CamMethod.ABLATION_CAM) and c not in shared_grads:
                shared_grads[c] = backward(net, trace, c)
            if method is CamMethod.ABLATION_CAM and c not in shared_drops:
                shared_drops[c] = per_channel_score_drops(net, trace, layer, c, threads=thread_count())
            result = compute_cam(
                net, trace, method, layer, c,
                gradients=shared_grads.get(c), score_drops=shared_drops.get(c),
            )
            panels.append(render_heatmap(result.heatmap, raw if args.overlay else None))
        rows.append(tile_horizontal(panels))
    save_png(args.out, tile_vertical(rows))
    print(f"rows: {', '.join(methods)}")
    print(f"columns: {', '.join(f'{c} ({_class_label(net, c)})' for c in classes)}")
    print(f"wrote {args.out}")
    return EXIT_OK


def _report_dict(image: str, report: AxiomReport) -> dict:
    d = {
        "image": image,
        "method": report.method.value,
        "layer": report.layer,
        "class": report.class_index,
        "score": report.score,
        "sensitivity_residual": report.sensitivity_residual,
        "conservation_residual": report.conservation_residual,
        "epsilon": report.epsilon,
        "epsilon_normalized": report.epsilon_normalized,
        "phi": report.phi,
    }
    if report.zeta_per_channel is not None:
        d["zeta_per_channel"] = list(report.zeta_per_channel)
    return d


def _fmt(v: Optional[float]) -> str:
    return "n/a" if v is None else f"{v:.6f}"


def cmd_axioms(args) -> int:
    net = load_model(args.model)
    methods = _parse_methods(args.methods)
    files = _corpus_files(args.images)
    layer_holder: dict[str, int] = {}

    def work(path: Path) -> list[dict]:
        raw, norm = load_image(path, net, allow_resize=args.resize)
        trace = forward(net, norm)
        layer = _resolve_layer(net, args.layer)
        layer_holder["layer"] = layer
        c = int(np.argmax(trace.scores.array))
        grads = backward(net, trace, c)
        drops = per_channel_score_drops(net, trace, layer, c)
        out = []
        for name in methods:
            report = axiom_report(
                net, trace, METHOD_NAMES[name], layer, c,
                gradients=grads, score_drops=drops, include_zeta=args.include_zeta,
            )
            out.append(_report_dict(path.name, report))
        return out

    per_image = [row for rows in parallel_map(work, files, thread_count()) for row in rows]

    summary = {}
    for name in methods:
        mrows = [r for r in per_image if r["method"] == METHOD_NAMES[name].value]
        sens_mean, sens_excl = mean_defined([r["sensitivity_residual"] for r in mrows])
        cons_mean, cons_excl = mean_defined([r["conservation_residual"] for r in mrows])
        eps_mean, eps_excl = mean_defined([r["epsilon_normalized"] for r in mrows])
        phi_mean, _ = mean_defined([r["phi"] for r in mrows])
        summary[name] = {
            "images": len(mrows),
            "sensitivity_mean": sens_mean, "sensitivity_excluded": sens_excl,
            "conservation_mean": cons_mean, "conservation_excluded": cons_excl,
            "epsilon_normalized_mean": eps_mean, "epsilon_excluded": eps_excl,
            "phi_mean": phi_mean,
        }

    print(f"{'method':<10} {'n':>4} {'sensitivity':>12} {'excl':>4} {'conservation':>12} "
          f"{'excl':>4} {'|eps/score|':>12} {'phi':>12}")
    for name in methods:
        s = summary[name]
        print(f"{name:<10} {s['images']:>4} {_fmt(s['sensitivity_mean']):>12} {s['sensitivity_excluded']:>4} "
              f"{_fmt(s['conservation_mean']):>12} {s['conservation_excluded']:>4} "
              f"{_fmt(s['epsilon_normalized_mean']):>12} {_fmt(s['phi_mean']):>12}")

    if args.csv:
        fields = ["image", "method", "layer", "class", "score", "sensitivity_residual",
                  "conservation_residual", "epsilon", "epsilon_normalized", "phi"]
        rows = [{k: ("" if r.get(k) is None else r.get(k)) for k in fields} for r in per_image]
        write_csv(args.csv, fields, rows)
        print(f"wrote {args.csv}")
    if args.json:
        write_json(args.json, {"layer": layer_holder.get("layer"), "summary": summary, "per_image": per_image})
        print(f"wrote {args.json}")
    return EXIT_OK


def cmd_perturb(args) -> int:
    net = load_model(args.model)
    methods = _parse_methods(args.methods, allow_pseudo=True)
    files = _corpus_files(args.images)
    keep_dir = Path(args.keep_perturbed) if args.keep_perturbed else None
    if keep_dir is not None:
        keep_dir.mkdir(parents=True, exist_ok=True)
    coverage = 1.0 - args.percentile / 100.0

    def work(path: Path) -> list[dict]:
        raw, norm = load_image(path, net, allow_resize=args.resize)
        trace = forward(net, norm)
        layer = _resolve_layer(net, args.layer)
        c = int(np.argmax(trace.scores.array))
        grads = backward(net, trace, c)
        drops = None
        height, width = raw.shape[1], raw.shape[2]
        out = []
        for name in methods:
            if name == "zero":
                mask = build_mask(Tensor(np.zeros((height, width))), args.percentile)
            elif name == "random":
                mask = random_mask(height, width, coverage, stable_seed(path.name))
            else:
                method = METHOD_NAMES[name]
                if method is CamMethod.ABLATION_CAM and drops is None:
                    drops = per_channel_score_drops(net, trace, layer, c)
                result = compute_cam(net, trace, method, layer, c, gradients=grads, score_drops=drops)
                mask = build_mask(result.heatmap, args.percentile)
            pres = confidence_drop(net, raw, None, c, mask=mask)
            out.append({
                "image": path.name, "method": name, "class": c,
                "confidence_original": pres.confidence_original,
                "confidence_perturbed": pres.confidence_perturbed,
                "drop": pres.drop, "threshold": pres.threshold,
                "coverage": pres.coverage, "degenerate": pres.degenerate,
            })
            if keep_dir is not None:
                perturbed = perturb_image(raw, mask.mask, net.mean)
                pixels = np.floor(perturbed.array * 255.0 + 0.5).astype(np.uint8)
                pixels = pixels[0] if pixels.shape[0] == 1 else pixels.transpose(1, 2, 0)
                save_png(keep_dir / f"{path.stem}.{name}.png", pixels)
        return out

    per_image = [row for rows in parallel_map(work, files, thread_count()) for row in rows]

    summary = {}
    for name in methods:
        mrows = [r for r in per_image if r["method"] == name]
        summary[name] = {
            "images": len(mrows),
            "mean_drop": float(np.mean([r["drop"] for r in mrows])),
            "degenerate": sum(1 for r in mrows if r["degenerate"]),
        }

    print(f"{'method':<10} {'n':>4} {'mean drop':>12} {'degenerate':>10}")
    for name in methods:
        s = summary[name]
        print(f"{name:<10} {s['images']:>4} {s['mean_drop']:>12.6f} {s['degenerate']:>10}")

    if args.csv:
        fields = ["image", "method", "class", "confidence_original", "confidence_perturbed",
                  "drop", "threshold", "coverage", "degenerate"]
        write_csv(args.csv, fields, per_image)
        print(f"wrote {args.csv}")
    if args.json:
        write_json(args.json, {"percentile": args.percentile, "summary": summary, "per_image": per_image})
        print(f"wrote {args.json}")
    return EXIT_OK


def cmd_check_identity(args) -> int:
    net = load_model(args.model)
    raw, norm = load_image(args.image, net, allow_resize=args.resize)
    trace = forward(net, norm)
    c = int(np.argmax(trace.scores.array))
    grads = backward(net, trace, c)
    if args.corrupt_gradients:
        grads = GradientTrace(
            class_index=grads.class_index,
            gradients=tuple(Tensor(g.array * 1.01) for g in grads.gradients),
            input_gradient=grads.input_gradient,
        )
    layers = list(range(len(net.layers) - 1)) if args.all_layers else [net.last_spatial_layer()]
    print(f"class {c} score {float(trace.scores.array[c]):.6f}")
    print(f"{'layer':>5} {'kind':<16} {'grad*act sum':>16} {'epsilon':>16} {'residual':>12} status")
    failed = False
    for l in layers:
        chk = decomposition_check(net, trace, grads, l)
        ok = chk.identity_residual <= IDENTITY_TOLERANCE
        failed = failed or not ok
        print(f"{l:>5} {net.layers[l].label:<16} {chk.gradient_feature_sum:>16.8f} "
              f"{chk.epsilon_bias_traced:>16.8f} {chk.identity_residual:>12.3e} "
              f"{'PASS' if ok else 'FAIL'}")
    return EXIT_IDENTITY if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="camx", description="CNN class-activation explanations and axiom checks")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, image=True):
        p.add_argument("--model", required=True, help="model manifest path (.json)")
        if image:
            p.add_argument("--image", required=True, help="input image (PNG/PPM/PGM)")
        p.add_argument("--layer", default=None, help="target layer name or index (default: last spatial)")
        p.add_argument("--resize", action="store_true", help="bilinearly resize mismatched images")

    p = sub.add_parser("visualize", help="write a heatmap for one image")
    common(p)
    p.add_argument("--method", choices=sorted(METHOD_NAMES), required=True)
    p.add_argument("--class", dest="class_index", default="auto", help="class index or 'auto' (top-1)")
    p.add_argument("--out", required=True, help="output PNG path")
    p.add_argument("--guided", action="store_true", help="also write the guided-fusion image")
    p.add_argument("--overlay", action="store_true", help="blend the heatmap over the input")
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("compare", help="tile per-class, per-method heatmaps into one image")
    common(p)
    p.add_argument("--classes", required=True, help="comma-separated class indices (or 'auto')")
    p.add_argument("--methods", default="xgrad", help="comma-separated methods (rows)")
    p.add_argument("--out", required=True, help="output PNG path")
    p.add_argument("--overlay", action="store_true")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("axioms", help="sensitivity/conservation report over an image directory")
    common(p, image=False)
    p.add_argument("--images", required=True, help="directory of corpus images")
    p.add_argument("--methods", default="grad,gradpp,ablation,xgrad")
    p.add_argument("--include-zeta", action="store_true", help="add per-channel gradient-shift terms (slow)")
    p.add_argument("--csv", default=None, help="write per-image rows to CSV")
    p.add_argument("--json", default=None, help="write full report to JSON")
    p.set_defaults(func=cmd_axioms)

    p = sub.add_parser("perturb", help="confidence-drop report over an image directory")
    common(p, image=False)
    p.add_argument("--images", required=True, help="directory of corpus images")
    p.add_argument("--methods", default="grad,gradpp,ablation,xgrad,random",
                   help="methods plus controls 'random' and 'zero'")
    p.add_argument("--percentile", type=float, default=80.0, help="mask threshold percentile")
    p.add_argument("--keep-perturbed", default=None, help="directory to save occluded images")
    p.add_argument("--csv", default=None)
    p.add_argument("--json", default=None)
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("check-identity", help="verify the score-decomposition identity per layer")
    common(p)
    p.add_argument("--all-layers", action="store_true", help="check every layer, not just the target")
    p.add_argument("--corrupt-gradients", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_check_identity)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ModelFormatError, ImageFormatError, ArchitectureError, ShapeMismatchError,
            ValueError, IndexError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
