"""Command-line surface: distortion, filtering, training, RD evaluation.

Subcommands share one convention: results (PLY, CSV, bitstreams, tables)
go to the requested outputs or stdout, diagnostics go to stderr, and the
exit status is 0 only when the full pipeline succeeded.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import raht
from .combine import (
    apply_offsets,
    encode_with_fallback,
    read_coeff_stream,
    write_coeff_stream,
)
from .metrics import psnr, psnr_yuv, bd_rate, RDCurve, read_rd_csv, write_rd_csv
from .model import COMPONENTS, assemble_component_input, build_model, load_weights
from .pcio import PointCloudFrame, read_ply, rgb_to_yuv, write_ply, yuv_to_rgb
from .train import TrainConfig, make_training_set, train


def load_component_models(paths: dict) -> dict:
    """Load one weight file per component, checking each file's tag."""
    models = {}
    for comp in COMPONENTS:
        path = paths.get(comp)
        if path is None:
            raise ValueError(f"missing weights for component {comp}")
        cfg, params, _ = load_weights(path)
        if cfg.component != comp:
            raise ValueError(
                f"{path} holds a {cfg.component} model, expected {comp}"
            )
        models[comp] = (build_model(cfg), params)
    return models


def filter_frame(models, compressed: PointCloudFrame, original=None, records=None):
    """Run the three-component cascade on one compressed frame.

    Encoder mode (original given) solves and quantizes the per-component
    mixes; decoder mode applies the supplied records instead.  Returns
    (filtered yuv attrs in [0, 255], records).  The network conditions on
    the compressed channels only, so both modes see identical inputs.
    """
    if (original is None) == (records is None):
        raise ValueError("pass exactly one of original or records")
    comp_yuv = rgb_to_yuv(compressed).attrs
    if original is not None:
        if not np.array_equal(original.coords, compressed.coords):
            raise ValueError("original and compressed geometry differ")
        orig_yuv = rgb_to_yuv(original).attrs
    peak = compressed.peak

    plans = {}
    filtered = comp_yuv.copy()
    out_records = []
    for i, comp in enumerate(COMPONENTS):
        model, params = models[comp]
        key = (model.cfg.lfe_levels, model.cfg.kernel_size)
        if key not in plans:
            plans[key] = model.plan(compressed.coords)
        feats = assemble_component_input(compressed.coords, comp_yuv, comp)
        r = model.forward(params, feats, plans[key]).feats
        f_hat = comp_yuv[:, i] / peak
        if original is not None:
            out, rec = encode_with_fallback(orig_yuv[:, i] / peak, f_hat, r, comp)
        else:
            rec = records[i]
            if rec.component != comp:
                raise ValueError(f"record {i} is for {rec.component}, expected {comp}")
            out = apply_offsets(f_hat, r, rec)
        filtered[:, i] = out * peak
        out_records.append(rec)
    return filtered, out_records


def _stats_block(yuv_ref, yuv_test, peak):
    per = {
        comp: psnr(yuv_ref[:, i], yuv_test[:, i], peak)
        for i, comp in enumerate(COMPONENTS)
    }
    per["YUV"] = psnr_yuv(yuv_ref, yuv_test, peak)
    return per


def cmd_distort(args) -> int:
    frame = read_ply(args.input)
    yuv = rgb_to_yuv(frame)
    hat, bpp = raht.distort(frame.coords, yuv.attrs, args.q, peak=frame.peak)
    write_ply(yuv_to_rgb(frame.with_attrs(hat, "yuv")), args.output)
    stats = {
        "q": args.q,
        "num_points": frame.num_points,
        "bpp": bpp,
        "psnr": _stats_block(yuv.attrs, hat, frame.peak),
    }
    if args.stats:
        Path(args.stats).write_text(json.dumps(stats, indent=2) + "\n")
    print(
        f"distorted {frame.num_points} points at q={args.q}: "
        f"{bpp:.3f} bpp, {stats['psnr']['YUV']:.2f} dB YUV",
        file=sys.stderr,
    )
    return 0


def cmd_filter(args) -> int:
    compressed = read_ply(args.input)
    models = load_component_models(
        {"Y": args.weights_y, "U": args.weights_u, "V": args.weights_v}
    )
    if args.original:
        original = read_ply(args.original)
        filtered, records = filter_frame(models, compressed, original=original)
        if args.coeffs:
            Path(args.coeffs).write_bytes(write_coeff_stream(records))
        ref = rgb_to_yuv(original).attrs
        before = psnr_yuv(ref, rgb_to_yuv(compressed).attrs, compressed.peak)
        after = psnr_yuv(ref, filtered, compressed.peak)
        print(
            f"filtered (encoder): {before:.3f} -> {after:.3f} dB YUV, "
            f"records {[r.values for r in records]}",
            file=sys.stderr,
        )
    else:
        if not args.coeffs:
            raise ValueError("decoder mode needs --coeffs (no --original given)")
        records = read_coeff_stream(Path(args.coeffs).read_bytes())
        filtered, _ = filter_frame(models, compressed, records=records)
        print(
            f"filtered (decoder): applied records {[r.values for r in records]}",
            file=sys.stderr,
        )
    out = yuv_to_rgb(compressed.with_attrs(filtered, "yuv"))
    write_ply(out, args.output)
    return 0


def cmd_train(args) -> int:
    cfg = TrainConfig(
        seed=args.seed,
        steps=args.steps,
        q=args.q,
        component=args.component,
        profile=args.profile,
        augment=args.augment,
    )
    frames = make_training_set(args.frames, args.seed)
    result = train(cfg, frames, out_path=args.output, log=sys.stderr)
    print(
        f"trained {args.component} for {cfg.steps} steps "
        f"(final loss {result.losses[-1]:.3e}, {result.skipped} skipped) "
        f"-> {args.output}",
        file=sys.stderr,
    )
    return 0


def cmd_eval(args) -> int:
    steps = args.q or list(raht.DEFAULT_STEPS)
    if args.label and len(args.input) > 1:
        raise ValueError("--label only applies to a single input")
    models = None
    if args.weights_y or args.weights_u or args.weights_v:
        models = load_component_models(
            {"Y": args.weights_y, "U": args.weights_u, "V": args.weights_v}
        )
    rows = []
    for path in args.input:
        frame = read_ply(path)
        label = args.label or Path(path).stem
        yuv = rgb_to_yuv(frame).attrs
        for q in steps:
            hat, bpp = raht.distort(frame.coords, yuv, q, peak=frame.peak)
            test = hat
            if models is not None:
                hat_rgb = yuv_to_rgb(frame.with_attrs(hat, "yuv"))
                test, records = filter_frame(models, hat_rgb, original=frame)
                bpp += sum(r.payload_bits for r in records) / frame.num_points
            block = _stats_block(yuv, test, frame.peak)
            for comp in (*COMPONENTS, "YUV"):
                rows.append(
                    {"label": label, "component": comp, "bpp": bpp, "psnr": block[comp]}
                )
            print(
                f"{label} q={q}: {bpp:.4f} bpp, {block['YUV']:.3f} dB YUV",
                file=sys.stderr,
            )
    write_rd_csv(args.output, rows)
    return 0


def cmd_bdrate(args) -> int:
    anchor = read_rd_csv(args.anchor)
    test = read_rd_csv(args.test)
    labels = sorted({k[0] for k in anchor} & {k[0] for k in test})
    if not labels:
        raise ValueError("no shared labels between anchor and test")
    columns = (*COMPONENTS, "YUV")
    table = []
    for label in labels:
        row = []
        for comp in columns:
            key = (label, comp)
            if key not in anchor or key not in test:
                raise ValueError(f"missing rows for {key}")
            row.append(
                bd_rate(
                    RDCurve(f"anchor/{label}/{comp}", anchor[key]),
                    RDCurve(f"test/{label}/{comp}", test[key]),
                )
            )
        table.append((label, row))

    width = max(len("average"), *(len(l) for l in labels))
    print(f"{'label':<{width}}  " + "".join(f"{c:>9}" for c in columns))
    for label, row in table:
        print(f"{label:<{width}}  " + "".join(f"{v:>9.2f}" for v in row))
    mean = np.mean([row for _, row in table], axis=0)
    print(f"{'average':<{width}}  " + "".join(f"{v:>9.2f}" for v in mean))
    return 0


def cmd_coeffs(args) -> int:
    records = read_coeff_stream(Path(args.input).read_bytes())
    for i, rec in enumerate(records):
        print(
            f"record {i}: component {rec.component} values {rec.values} "
            f"({rec.payload_bits} payload bits)"
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="carnet",
        description="In-loop attribute filtering toolkit for voxelized point clouds",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("distort", help="compress-and-reconstruct a cloud's colors")
    p.add_argument("--input", required=True, help="original .ply")
    p.add_argument("--output", required=True, help="distorted .ply to write")
    p.add_argument("--q", type=float, default=0.1, help="quantization step")
    p.add_argument("--stats", help="optional stats .json to write")
    p.set_defaults(func=cmd_distort)

    p = sub.add_parser("filter", help="apply the three-component filter cascade")
    p.add_argument("--input", required=True, help="compressed .ply")
    p.add_argument("--output", required=True, help="filtered .ply to write")
    p.add_argument("--original", help="original .ply (encoder mode)")
    p.add_argument("--coeffs", help="coefficient bitstream (written in encoder mode, read in decoder mode)")
    p.add_argument("--weights-y", required=True)
    p.add_argument("--weights-u", required=True)
    p.add_argument("--weights-v", required=True)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("train", help="train one component model on synthetic shells")
    p.add_argument("--output", required=True, help="weight file to write")
    p.add_argument("--component", choices=COMPONENTS, default="Y")
    p.add_argument("--profile", choices=("desk", "full"), default="desk")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--frames", type=int, default=8, help="synthetic training clouds")
    p.add_argument("--augment", type=int, default=3, help="extra variants per frame")
    p.add_argument("--q", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="rate-distortion sweep to a CSV")
    p.add_argument("--input", nargs="+", required=True, help="original .ply files")
    p.add_argument("--output", required=True, help="CSV to write")
    p.add_argument("--q", type=float, action="append", help="step (repeatable)")
    p.add_argument("--label", help="row label (single input only)")
    p.add_argument("--weights-y")
    p.add_argument("--weights-u")
    p.add_argument("--weights-v")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bdrate", help="BD-Rate table between two eval CSVs")
    p.add_argument("--anchor", required=True)
    p.add_argument("--test", required=True)
    p.set_defaults(func=cmd_bdrate)

    p = sub.add_parser("coeffs", help="inspect a coefficient bitstream")
    p.add_argument("--input", required=True)
    p.set_defaults(func=cmd_coeffs)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
