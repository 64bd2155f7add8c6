#!/usr/bin/env python3
"""
DisCoPatch Command Line
Train the adversarial VAE on a folder of images, score images, run OOD
benchmarks and the batch-statistics experiment, build corruption grids,
measure latency, export features and generate the synthetic dataset.

    python discopatch.py synth --out data/clean --n 2000 --seed 0
    python discopatch.py corrupt --in data/clean --out data/corrupt --kinds all --severities 1-5
    python discopatch.py train --preset desk --data data/clean --out runs/desk
    python discopatch.py eval --ckpt runs/desk/model.dcpk --id data/test --ood data/corrupt/gaussian_noise/3
"""

import argparse
import json
import logging
import sys
import time
from datetime import datetime
from pathlib import Path
from typing import List, Optional

import numpy as np

from checkpoint import load_checkpoint, load_tensor_table
from corruptions import build_corrupted_set, parse_kinds, parse_severities
from evaluation import (batch_bias_experiment, bench_latency, export_features, patch_count_sweep,
                        run_eval, run_grid_eval, score_image)
from image_io import load_directory, load_image_uint8
from models import build_model
from patching import image_rng, standardize_image
from run_config import (PRESET_ALIASES, PRESETS, apply_overrides, load_config_file, parse_config, preset,
                        serialize_config)
from synth_dataset import synth_dataset
from training import fit

DEFAULT_IMAGE_SIZE = 256


def setup_logging(log_file: str = "discopatch.log", quiet: bool = False) -> None:
    stream = logging.StreamHandler()
    stream.setLevel(logging.WARNING if quiet else logging.INFO)
    logging.basicConfig(
        level=logging.INFO,
        format='%(asctime)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(log_file),
            stream
        ],
        force=True
    )


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got '{text}'") from None


def _write_summary(path: Path, summary: dict) -> None:
    with open(path, "w") as f:
        json.dump(summary, f, indent=2, default=str)


def _banner(title: str, lines: List[str]) -> None:
    logging.info("=" * 60)
    logging.info(title)
    logging.info("=" * 60)
    for line in lines:
        logging.info(line)
    logging.info("=" * 60)


# =============================================================================
# Subcommands
# =============================================================================

def cmd_train(args) -> int:
    cfg = load_config_file(args.config) if args.config else preset(args.preset)
    cfg = apply_overrides(cfg, {
        "train.epochs": args.epochs,
        "train.lr": args.lr,
        "train.seed": args.seed,
        "train.batch_images": args.batch_images,
        "train.patches_per_image": args.patches_per_image,
        "train.checkpoint_every": args.checkpoint_every,
        "model.norm_kind": args.norm_kind,
    })
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    config_text = serialize_config(cfg)
    (out_dir / "config.ini").write_text(config_text, encoding="utf-8")

    names, images, skipped = load_directory(args.data, cfg.model.image_size)
    if not images:
        logging.error(f"No readable training images in {args.data}")
        return 1
    model = build_model(cfg.model, cfg.norm, seed=cfg.train.seed)
    logging.info(f"Starting training: {len(images)} images, {model.parameter_count():,} parameters, "
                 f"{cfg.train.epochs} epochs")

    start_time = time.time()
    _, log_frame = fit(images, model, cfg.train, cfg.weights, log_path=out_dir / "train_log.csv",
                       checkpoint_path=out_dir / "model.dcpk", config=cfg)
    summary = {
        "data_dir": str(args.data),
        "output_dir": str(out_dir),
        "images": len(images),
        "skipped": skipped,
        "epochs": cfg.train.epochs,
        "steps": int(log_frame["step"].iloc[-1]) if len(log_frame) else 0,
        "parameters": model.parameter_count(),
        "final": log_frame.iloc[-1].to_dict() if len(log_frame) else None,
        "model_fingerprint": model.fingerprint(),
        "training_time": time.time() - start_time,
        "timestamp": datetime.now().isoformat(),
    }
    _write_summary(out_dir / "train_summary.json", summary)
    _banner("TRAINING COMPLETED", [
        f"Images: {summary['images']} ({len(skipped)} skipped)",
        f"Steps: {summary['steps']}",
        f"Total training time: {summary['training_time']:.2f} seconds",
        f"Results saved to: {out_dir}",
    ])
    return 0


def cmd_score(args) -> int:
    model, cfg = load_checkpoint(args.ckpt)
    image = standardize_image(load_image_uint8(args.image), cfg.model.image_size)
    n_patches = args.patches or cfg.eval.n_patches
    score = score_image(model.eval(), image, n_patches, image_rng(args.seed, Path(args.image).name),
                        tiled=args.tiled)
    print(f"{score:.6f}")
    return 0


def cmd_eval(args) -> int:
    model, cfg = load_checkpoint(args.ckpt)
    n_patches = args.patches or cfg.eval.n_patches
    config_text = serialize_config(cfg)
    if args.grid:
        report = run_grid_eval(model, args.id, args.grid, n_patches, args.seed, args.tiled, args.workers,
                               config_text)
    else:
        if not args.ood:
            logging.error("eval needs --ood directories or --grid")
            return 2
        report = run_eval(model, args.id, args.ood, n_patches, args.seed, args.tiled, args.workers, config_text)
    print(report.format_table())
    if args.csv:
        report.write_csv(args.csv)
        _write_summary(Path(args.csv).with_name(Path(args.csv).stem + "_summary.json"), report.summary())

    if args.patch_counts:
        sweep = patch_count_sweep(model, args.id, args.ood or [], args.patch_counts, args.seed, args.workers,
                                  grid_dir=args.grid)
        print()
        print(sweep.to_string(index=False, formatters={"auroc": "{:.3f}".format, "fpr95": "{:.3f}".format}))
        if args.csv:
            sweep.to_csv(Path(args.csv).with_name(Path(args.csv).stem + "_patch_counts.csv"), index=False)
    _banner("EVALUATION COMPLETED", [
        f"Datasets: {len(report.rows)}",
        f"Skipped images: {sum(report.skipped.values())}",
        f"Total evaluation time: {report.wall_clock:.2f} seconds",
    ])
    return 0


def cmd_batch_bias(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    modes = ["learned", "batch"] if args.mode == "both" else [args.mode]
    grid = batch_bias_experiment(model, args.id, args.ood, args.batch_sizes, modes, args.seed)
    shown = grid.assign(result=[f"{a * 100:.1f}/{f * 100:.1f}" for a, f in zip(grid["auroc"], grid["fpr95"])])
    print(shown[["mode", "batch_size", "dataset", "result"]].to_string(index=False))
    if args.csv:
        grid.to_csv(args.csv, index=False, float_format="%.6f")
    return 0


def cmd_corrupt(args) -> int:
    size = args.size
    if args.ckpt:
        _, config_text = load_tensor_table(args.ckpt)
        model_size = parse_config(config_text).model.image_size
        if size is not None and size != model_size:
            logging.error(f"--size {size} does not match the checkpoint's image size {model_size}")
            return 2
        size = model_size
    if size is None:
        size = DEFAULT_IMAGE_SIZE
    manifest = build_corrupted_set(args.input, parse_kinds(args.kinds), parse_severities(args.severities),
                                   args.seed, args.out, image_size=size, max_workers=args.workers)
    print(f"Wrote {len(manifest)} corrupted {size}x{size} images to {args.out}")
    return 0


def cmd_bench(args) -> int:
    model, cfg = load_checkpoint(args.ckpt)
    n_patches = args.patches or cfg.eval.n_patches
    reports = [bench_latency(model, args.runs, n_patches, args.seed + r) for r in range(args.repeats)]
    for i, report in enumerate(reports, 1):
        if report["mean_ms"] is None:
            print(f"run {i}: no timings (n_runs={report['n_runs']})")
        else:
            print(f"run {i}: mean {report['mean_ms']:.3f} ms, p50 {report['p50_ms']:.3f} ms, "
                  f"p95 {report['p95_ms']:.3f} ms, min {report['min_ms']:.3f} ms over {report['n_runs']} images")
    means = [r["mean_ms"] for r in reports if r["mean_ms"] is not None]
    if len(means) > 1:
        print(f"coefficient of variation of the mean: {np.std(means) / np.mean(means):.3%}")
    return 0


def cmd_export_features(args) -> int:
    model, cfg = load_checkpoint(args.ckpt)
    names, images, _ = load_directory(args.images, cfg.model.image_size)
    frame = export_features(model, names, images, args.patches or cfg.eval.n_patches, args.seed, args.out)
    print(f"Exported {len(frame)} rows to {args.out}")
    return 0


def cmd_synth(args) -> int:
    manifest = synth_dataset(args.out, args.n, args.seed, args.size, args.workers)
    print(f"Wrote {len(manifest)} images to {args.out}")
    return 0


# =============================================================================
# Parser
# =============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="DisCoPatch OOD detector")
    parser.add_argument("--log-file", default="discopatch.log", help="Log file (default: discopatch.log)")
    parser.add_argument("--quiet", action="store_true", help="Only warnings and errors on the console")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="Train on a directory of images")
    source = p.add_mutually_exclusive_group()
    source.add_argument("--config", help="INI run config")
    source.add_argument("--preset", default="desk",
                        choices=[*PRESETS, *PRESET_ALIASES])
    p.add_argument("--data", required=True, help="Directory of ID training images")
    p.add_argument("--out", required=True, help="Output directory for checkpoint, log and config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-images", type=int)
    p.add_argument("--patches-per-image", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--norm-kind", choices=["batch", "patch", "group", "instance"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="Print the anomaly score of one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--patches", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tiled", action="store_true", help="Non-overlapping grid patches, topped up randomly")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="AUROC / FPR95 of ID vs OOD directories")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--id", required=True)
    p.add_argument("--ood", nargs="+")
    p.add_argument("--grid", help="Corruption output directory (with manifest.csv)")
    p.add_argument("--patches", type=int)
    p.add_argument("--patch-counts", type=_int_list, help="Also sweep these patch counts, e.g. 4,16,64")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tiled", action="store_true")
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("batch-bias", help="Learned vs batch statistics over batch sizes")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--id", required=True)
    p.add_argument("--ood", nargs="+", required=True)
    p.add_argument("--batch-sizes", type=_int_list, default=[1, 16, 32, 64, 128, 256])
    p.add_argument("--mode", choices=["learned", "batch", "both"], default="both")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_batch_bias)

    p = sub.add_parser("corrupt", help="Build a kind x severity corruption grid")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kinds", default="all")
    p.add_argument("--severities", default="1-5")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int,
                   help="Standardized image size before corrupting (default: the --ckpt model's, else 256)")
    p.add_argument("--ckpt", help="Take the image size from this checkpoint")
    p.add_argument("--workers", type=int, default=4)
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("bench", help="Single-image scoring latency")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--runs", type=int, default=1000)
    p.add_argument("--patches", type=int)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("export-features", help="Patch-mean penultimate discriminator features")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--patches", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_features)

    p = sub.add_parser("synth", help="Generate the synthetic ID dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=DEFAULT_IMAGE_SIZE)
    p.add_argument("--workers", type=int, default=4)
    p.set_defaults(func=cmd_synth)
    return parser


def cli(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else 2

    setup_logging(args.log_file, args.quiet)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        logging.error("Interrupted")
        return 130
    except Exception as e:
        logging.error(f"{args.command} failed: {e}")
        return 1


def main():
    sys.exit(cli())


if __name__ == "__main__":
    main()
