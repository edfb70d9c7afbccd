#!/usr/bin/env python3
"""
bpq.py - Command-line pipeline for the INT8 blood-pressure encoder

Generates synthetic ECG/PPG data, pre-trains and fine-tunes the encoder, quantizes
it, and writes clinical evaluation reports. Every command that produces a file also
writes ``<out>.manifest.json`` (flags, seeds, inputs, input data hash, duration).

Usage:
    # Synthetic dataset (16 + N*10008 bytes)
    python3 scripts/bpq.py gen-data --n 2000 --seed 7 --out data.bpseg

    # Masked-patch pre-training, then fine-tuning
    python3 scripts/bpq.py pretrain --epochs 5 --mask 0.5 --seed 0 --out pre.bpmdl
    python3 scripts/bpq.py train --data data.bpseg --init pretrained:pre.bpmdl \\
        --backbone unfrozen --epochs 60 --out ft.bpmdl

    # Quantization (static needs calibration data)
    python3 scripts/bpq.py quantize --model ft.bpmdl --mode dynamic --out ft.bpqnt
    python3 scripts/bpq.py quantize --model ft.bpmdl --mode static --observer histogram \\
        --calib data.bpseg --out ft-static.bpqnt

    # Reports (float or quantized models, detected by magic)
    python3 scripts/bpq.py eval --model ft.bpqnt --data data.bpseg --out report.json
    python3 scripts/bpq.py compare --models ft.bpmdl,ft.bpqnt --data data.bpseg \\
        --out compare.md --timing
    python3 scripts/bpq.py info --model ft.bpqnt

Seed sweeps are plain shell loops, one process per seed:
    for s in $(seq 0 9); do python3 scripts/bpq.py train ... --seed $s --out m$s.bpmdl; done

Exit codes:
    0 success, 2 usage/configuration error, 3 data error, 4 numeric error

Environment Variables:
    LOG_FORMAT  - "text" (default) or "json" log lines on stderr
    BPQ_THREADS - BLAS/OpenMP thread cap (default: 1, bit-reproducible)
"""

import argparse
import json
import os
import sys
import time
from typing import Any, Optional

import common
from common import (
    BPQError,
    ConfigError,
    DataError,
    DatasetMismatchError,
    RunManifest,
    log,
    read_manifest,
    sha256_file,
)
from clinical_metrics import compute_stats, evaluate, format_comparison
from encoder_model import EncoderModel, count_params, preset, save_model
from quantization import (
    OBSERVERS,
    QuantizedModel,
    QuantScheme,
    calibrate_static,
    convert,
    load_any,
    model_size_bytes,
    reduction_factor,
    save_quantized,
)
from signal_data import SplitSpec, generate_synthetic, read_container, split, write_container
from training import PretextOptions, TrainOptions, initial_model, pretrain_pretext, train

SPLITS = ("train", "val", "test", "all")


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _flags(args: argparse.Namespace) -> dict[str, Any]:
    return {k: v for k, v in sorted(vars(args).items()) if k != "command"}


def _finish(manifest: RunManifest, out_path: str) -> None:
    manifest.finish()
    manifest.write(out_path)
    log(
        f"{manifest.command} finished in {manifest.duration_seconds:.1f}s",
        command=manifest.command,
        outputs=manifest.outputs,
        duration_seconds=manifest.duration_seconds,
    )


def _select_split(path: str, which: str, split_seed: int):
    ds = read_container(path)
    if which == "all":
        return ds
    train_ds, val_ds, test_ds = split(ds, SplitSpec(seed=split_seed))
    return {"train": train_ds, "val": val_ds, "test": test_ds}[which]


def parse_init(value: str) -> tuple[str, Optional[str]]:
    """'scratch' or 'pretrained:PATH' -> (init_mode, path)."""
    if value == "scratch":
        return "scratch", None
    if value.startswith("pretrained:") and len(value) > len("pretrained:"):
        return "pretrained", value[len("pretrained:") :]
    raise ConfigError(f"--init must be 'scratch' or 'pretrained:PATH', got {value!r}")


def _model_lineage(model_path: str) -> tuple[dict[str, Any], Optional[str]]:
    """Table metadata and training-data hash recorded by the commands that built a model."""
    manifest = read_manifest(model_path)
    if manifest is None:
        return {}, None
    flags = manifest.get("flags", {})
    if manifest.get("command") == "quantize":
        meta, data_hash = _model_lineage(manifest.get("inputs", {}).get("model", ""))
        meta["quantization"] = flags.get("mode")
        return meta, data_hash
    if manifest.get("command") == "train":
        init = str(flags.get("init", "scratch"))
        meta = {
            "method": "FT" if init.startswith("pretrained") else "TFS",
            "frozen": flags.get("backbone") == "frozen",
            "epochs": flags.get("epochs"),
            "size": flags.get("config"),
        }
        return meta, manifest.get("data_sha256")
    return {}, manifest.get("data_sha256")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args: argparse.Namespace) -> int:
    manifest = RunManifest("gen-data", _flags(args), seeds={"seed": args.seed})
    ds = generate_synthetic(args.n, args.seed)
    size = write_container(ds, args.out)
    manifest.outputs.append(args.out)
    _finish(manifest, args.out)
    print(f"Wrote {len(ds)} segments to {args.out} ({size} bytes)")
    return 0


def cmd_pretrain(args: argparse.Namespace) -> int:
    manifest = RunManifest("pretrain", _flags(args), seeds={"seed": args.seed})
    opts = PretextOptions(
        mask_fraction=args.mask,
        epochs=args.epochs,
        seed=args.seed,
        batch_size=args.batch,
        learning_rate=args.lr,
        num_segments=args.segments,
    )
    model, history = pretrain_pretext(preset(args.config), opts)
    save_model(model, args.out)
    history_path = args.out + ".history.jsonl"
    history.write(history_path)
    manifest.outputs += [args.out, history_path]
    _finish(manifest, args.out)
    final = history.train_loss[-1]
    print(f"Pre-trained encoder saved to {args.out} (final masked MSE {final:.4f})")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    init_mode, init_path = parse_init(args.init)
    opts = TrainOptions(
        epochs=args.epochs,
        batch_size=args.batch,
        learning_rate=args.lr,
        seed=args.seed,
        backbone_mode=args.backbone,
        init_mode=init_mode,
        init_path=init_path,
    )
    manifest = RunManifest(
        "train",
        _flags(args),
        seeds={"seed": args.seed, "split_seed": args.split_seed},
        inputs={"data": args.data, **({"init": init_path} if init_path else {})},
        data_sha256=sha256_file(args.data),
    )
    train_ds, val_ds, _test = split(read_container(args.data), SplitSpec(seed=args.split_seed))
    model = initial_model(preset(args.config), opts)
    model, history = train(model, train_ds, val_ds, opts)
    save_model(model, args.out)
    history_path = args.out + ".history.jsonl"
    history.write(history_path)
    manifest.outputs += [args.out, history_path]
    _finish(manifest, args.out)
    print(
        f"Trained model saved to {args.out}: val MAE SBP {history.val_mae_sbp[-1]:.2f} mmHg, "
        f"DBP {history.val_mae_dbp[-1]:.2f} mmHg"
    )
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    manifest = RunManifest(
        "eval",
        _flags(args),
        seeds={"split_seed": args.split_seed},
        inputs={"model": args.model, "data": args.data},
        data_sha256=sha256_file(args.data),
    )
    model = load_any(args.model)
    meta, _ = _model_lineage(args.model)
    test_ds = _select_split(args.data, args.split, args.split_seed)
    report = evaluate(model, test_ds, model_tag=os.path.basename(args.model), meta=meta)

    md_path = os.path.splitext(args.out)[0] + ".md"
    common.atomic_write_text(args.out, report.to_json())
    common.atomic_write_text(md_path, report.to_markdown())
    manifest.outputs += [args.out, md_path]
    _finish(manifest, args.out)
    print(report.to_markdown(), end="")
    return 0


def cmd_quantize(args: argparse.Namespace) -> int:
    manifest = RunManifest(
        "quantize",
        _flags(args),
        seeds={"split_seed": args.split_seed},
        inputs={"model": args.model, **({"calib": args.calib} if args.calib else {})},
    )
    _, manifest.data_sha256 = _model_lineage(args.model)
    model = load_any(args.model)
    if not isinstance(model, EncoderModel):
        raise ConfigError(f"{args.model} is already quantized")
    scheme = QuantScheme("symmetric", args.weight_granularity, 1, args.bits)

    activations = None
    if args.mode == "static":
        if not args.calib:
            raise ConfigError("--mode static requires --calib DATA")
        calib_ds = _select_split(args.calib, args.calib_split, args.split_seed)
        activations = calibrate_static(model, calib_ds, args.observer, bits=args.bits)
    elif args.calib:
        log("--calib is ignored in dynamic mode", level="warning", calib=args.calib)

    qmodel = convert(model, args.mode, scheme, activations)
    written = save_quantized(qmodel, args.out)
    rf = reduction_factor(model_size_bytes(model), written)
    manifest.outputs.append(args.out)
    _finish(manifest, args.out)
    print(f"Quantized ({args.mode}) model saved to {args.out}: {written} bytes, RF {rf:.2f}")
    return 0


def time_forward(model, signals, repeats: int) -> dict[str, float]:
    """Latency stats (seconds) of single-batch forward passes after one warm-up call."""
    model.forward(signals)
    samples = []
    for _ in range(repeats):
        start = time.perf_counter()
        model.forward(signals)
        samples.append(time.perf_counter() - start)
    return compute_stats(samples)


def cmd_compare(args: argparse.Namespace) -> int:
    paths = [p for p in args.models.split(",") if p]
    if len(paths) < 2:
        raise ConfigError("--models needs at least two comma-separated model files")
    manifest = RunManifest(
        "compare",
        _flags(args),
        seeds={"split_seed": args.split_seed},
        inputs={**{f"model{i}": p for i, p in enumerate(paths)}, "data": args.data},
        data_sha256=sha256_file(args.data),
    )

    lineage = {p: _model_lineage(p) for p in paths}
    hashes = {p: h for p, (_meta, h) in lineage.items() if h}
    if len(set(hashes.values())) > 1:
        detail = ", ".join(f"{p}={h[:12]}" for p, h in hashes.items())
        raise DatasetMismatchError(f"Models were trained on different datasets: {detail}")

    test_ds = _select_split(args.data, args.split, args.split_seed)
    reports, timings = [], {}
    for p in paths:
        model = load_any(p)
        tag = os.path.basename(p)
        reports.append(evaluate(model, test_ds, model_tag=tag, meta=lineage[p][0]))
        if args.timing:
            timings[tag] = time_forward(model, test_ds.signals[: args.timing_batch], args.repeats)
            timings[tag]["bytes"] = model_size_bytes(model)

    table = format_comparison(reports, timings or None)
    json_path = os.path.splitext(args.out)[0] + ".json"
    payload: dict[str, Any] = {"reports": [r.to_dict() for r in reports]}
    if timings:
        payload["timings"] = timings
    common.atomic_write_text(args.out, table)
    common.atomic_write_text(json_path, json.dumps(payload, indent=2, sort_keys=True) + "\n")
    manifest.outputs += [args.out, json_path]
    _finish(manifest, args.out)
    print(table, end="")
    return 0


def cmd_info(args: argparse.Namespace) -> int:
    model = load_any(args.model)
    cfg = model.cfg
    kind = "quantized" if isinstance(model, QuantizedModel) else "float"
    print(f"File:        {args.model}")
    print(f"Kind:        {kind}")
    print(f"Size tag:    {cfg.size_tag}")
    print(
        f"Config:      patch_len={cfg.patch_len} embed_dim={cfg.embed_dim} "
        f"block_pairs={cfg.num_block_pairs} heads={cfg.num_heads} mlp_ratio={cfg.mlp_ratio}"
    )
    print(f"Parameters:  {count_params(cfg)}")
    print(f"Bytes:       {os.path.getsize(args.model)}")
    norm = model.target_norm
    print(
        f"Targets:     SBP {norm.sbp_mean:.2f}±{norm.sbp_sd:.2f}, "
        f"DBP {norm.dbp_mean:.2f}±{norm.dbp_sd:.2f}"
    )
    if isinstance(model, QuantizedModel):
        print(f"Mode:        {model.mode}")
        print(f"{'LAYER':<32} {'SCHEME':<24} {'PARAMS':<8} {'ACC'}")
        for name, layer in model.layers.items():
            s = layer.weight.scheme
            print(
                f"{name:<32} {s.symmetry + '/' + s.granularity + '/' + str(s.bits):<24} "
                f"{layer.weight.scales.size:<8} {layer.acc_dtype.__name__}"
            )
    return 0


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    """Build the argument parser for the bpq CLI."""
    parser = argparse.ArgumentParser(
        prog="bpq",
        description="Cuffless blood-pressure encoder: data, training, INT8 quantization, reports",
    )
    subparsers = parser.add_subparsers(dest="command", help="Command to execute")

    # gen-data
    gen = subparsers.add_parser("gen-data", help="Generate a synthetic ECG/PPG container")
    gen.add_argument("--n", type=int, required=True, help="Number of segments")
    gen.add_argument("--seed", type=int, default=0, help="Generator seed (default: 0)")
    gen.add_argument("--out", required=True, help="Output container path")

    # pretrain
    pre = subparsers.add_parser("pretrain", help="Masked-patch pre-training on synthetic sources")
    pre.add_argument("--config", default="tiny", help="Model preset (default: tiny)")
    pre.add_argument("--epochs", type=int, default=5, help="Epochs (default: 5)")
    pre.add_argument("--mask", type=float, default=0.5, help="Masked patch fraction (default: 0.5)")
    pre.add_argument("--segments", type=int, default=512, help="Source segments (default: 512)")
    pre.add_argument("--batch", type=int, default=32, help="Batch size (default: 32)")
    pre.add_argument("--lr", type=float, default=1e-3, help="Learning rate (default: 1e-3)")
    pre.add_argument("--seed", type=int, default=0, help="Seed (default: 0)")
    pre.add_argument("--out", required=True, help="Output checkpoint path")

    # train
    tr = subparsers.add_parser("train", help="Fine-tune or train from scratch")
    tr.add_argument("--data", required=True, help="Segment container")
    tr.add_argument("--config", default="tiny", help="Model preset (default: tiny)")
    tr.add_argument(
        "--init", default="scratch", help="'scratch' or 'pretrained:PATH' (default: scratch)"
    )
    tr.add_argument(
        "--backbone",
        choices=["frozen", "unfrozen"],
        default="unfrozen",
        help="Backbone mode (default: unfrozen)",
    )
    tr.add_argument("--epochs", type=int, default=60, help="Epochs (default: 60)")
    tr.add_argument("--lr", type=float, default=3e-4, help="Learning rate (default: 3e-4)")
    tr.add_argument("--batch", type=int, default=32, help="Batch size (default: 32)")
    tr.add_argument("--seed", type=int, default=0, help="Init/shuffle seed (default: 0)")
    tr.add_argument("--split-seed", type=int, default=0, help="Split seed (default: 0)")
    tr.add_argument("--out", required=True, help="Output model path")

    # eval
    ev = subparsers.add_parser("eval", help="Evaluate a float or quantized model")
    ev.add_argument("--model", required=True, help="BPMDL1 or BPQNT1 file")
    ev.add_argument("--data", required=True, help="Segment container")
    ev.add_argument("--split", choices=SPLITS, default="test", help="Split (default: test)")
    ev.add_argument("--split-seed", type=int, default=0, help="Split seed (default: 0)")
    ev.add_argument("--out", required=True, help="JSON report path (markdown written alongside)")

    # quantize
    qu = subparsers.add_parser("quantize", help="Post-training INT8 quantization")
    qu.add_argument("--model", required=True, help="Float model file")
    qu.add_argument("--mode", choices=["dynamic", "static"], default="dynamic")
    qu.add_argument("--observer", choices=list(OBSERVERS), default="minmax")
    qu.add_argument("--calib", default=None, help="Calibration container (static mode)")
    qu.add_argument(
        "--calib-split",
        choices=SPLITS,
        default="train",
        help="Calibration split of --calib (default: train)",
    )
    qu.add_argument("--split-seed", type=int, default=0, help="Split seed (default: 0)")
    qu.add_argument(
        "--weight-granularity", choices=["per_channel", "per_tensor"], default="per_channel"
    )
    qu.add_argument("--bits", type=int, default=8, help="Integer bit-width (default: 8)")
    qu.add_argument("--out", required=True, help="Output quantized model path")

    # compare
    cmp_ = subparsers.add_parser("compare", help="Side-by-side report of several models")
    cmp_.add_argument("--models", required=True, help="Comma-separated model files")
    cmp_.add_argument("--data", required=True, help="Segment container")
    cmp_.add_argument("--split", choices=SPLITS, default="test", help="Split (default: test)")
    cmp_.add_argument("--split-seed", type=int, default=0, help="Split seed (default: 0)")
    cmp_.add_argument("--timing", action="store_true", help="Add forward latency statistics")
    cmp_.add_argument("--repeats", type=int, default=10, help="Timed repeats (default: 10)")
    cmp_.add_argument("--timing-batch", type=int, default=1, help="Timed batch size (default: 1)")
    cmp_.add_argument("--out", required=True, help="Markdown table path (JSON written alongside)")

    # info
    info = subparsers.add_parser("info", help="Describe a model file")
    info.add_argument("--model", required=True, help="BPMDL1 or BPQNT1 file")

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    """Main entry point for the CLI."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    if not args.command:
        parser.print_help()
        return ConfigError.exit_code

    commands = {
        "gen-data": cmd_gen_data,
        "pretrain": cmd_pretrain,
        "train": cmd_train,
        "eval": cmd_eval,
        "quantize": cmd_quantize,
        "compare": cmd_compare,
        "info": cmd_info,
    }

    log(f"Running {args.command}", command=args.command)
    try:
        return commands[args.command](args)
    except BPQError as exc:
        print(f"Error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"Error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
