#!/usr/bin/env python3
"""
OOD Evaluation
AUROC / FPR95 metrics, ID-vs-OOD benchmark runs (per directory or over a
corruption grid), the batch-statistics bias experiment, patch-count sweeps,
latency measurement and penultimate feature export.

OOD is the positive class and higher anomaly scores mean more OOD.
"""

import hashlib
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from sklearn.metrics import roc_auc_score

from corruptions import read_manifest
from image_io import ImageFormatError, load_directory, load_image_uint8
from models import ModelParams, discriminate, penultimate_features
from normalization import GroupLayout, inference_statistics
from patching import concat_groups, group_scores, image_rng, make_inference_groups, whole_image_batch
from tensor_engine import no_grad

REPORT_COLUMNS = ["dataset", "n_id", "n_ood", "auroc", "fpr95"]
STAT_MODES = {"learned": "learned_stats", "batch": "batch_stats"}


# =============================================================================
# Metrics
# =============================================================================

def _as_scores(values, name: str) -> np.ndarray:
    scores = np.asarray(values, dtype=np.float64).reshape(-1)
    if scores.size == 0:
        raise ValueError(f"{name} scores are empty")
    return scores


def auroc(id_scores, ood_scores) -> float:
    """P(ood > id) + 1/2 P(ood == id), i.e. the Mann-Whitney statistic."""
    id_scores, ood_scores = _as_scores(id_scores, "ID"), _as_scores(ood_scores, "OOD")
    labels = np.concatenate([np.zeros(id_scores.size), np.ones(ood_scores.size)])
    return float(roc_auc_score(labels, np.concatenate([id_scores, ood_scores])))


def fpr_at_95tpr(id_scores, ood_scores, tpr: float = 0.95) -> float:
    """FPR on ID at the tightest threshold t with #(ood >= t) / n_ood >= tpr."""
    id_scores, ood_scores = _as_scores(id_scores, "ID"), _as_scores(ood_scores, "OOD")
    n_ood = ood_scores.size
    k = math.ceil(tpr * n_ood - 1e-9)
    k = min(max(k, 1), n_ood)
    threshold = np.sort(ood_scores)[::-1][k - 1]
    return float(np.count_nonzero(id_scores >= threshold) / id_scores.size)


# =============================================================================
# Scoring
# =============================================================================

def score_image(model: ModelParams, image: np.ndarray, n_patches: int, rng: np.random.Generator,
                tiled: bool = False, source_id: str = "image") -> float:
    batch = make_inference_groups(image, n_patches, model.cfg.patch_size, rng, tiled, source_id)
    with no_grad():
        realness = discriminate(model, batch)
    return float(group_scores(realness.data, batch.layout)[0])


def _score_chunk(model: ModelParams, names: Sequence[str], images: Sequence[np.ndarray],
                 n_patches: int, seed: int, tiled: bool) -> np.ndarray:
    groups = [make_inference_groups(img, n_patches, model.cfg.patch_size, image_rng(seed, name), tiled, name)
              for name, img in zip(names, images)]
    batch = concat_groups(groups)
    realness = discriminate(model, batch)
    return group_scores(realness.data, batch.layout)


def score_images(model: ModelParams, names: Sequence[str], images: Sequence[np.ndarray],
                 n_patches: int = 64, seed: int = 0, tiled: bool = False, workers: int = 1,
                 groups_per_batch: int = 8) -> np.ndarray:
    """Anomaly score per image; each image draws patches from its own (seed, name) stream."""
    if not images:
        return np.zeros(0)
    # Whole-batch normalization would mix images, so those models score one image per forward
    if model.cfg.norm_kind == "batch":
        groups_per_batch = 1
    chunks = [range(i, min(i + groups_per_batch, len(images))) for i in range(0, len(images), groups_per_batch)]
    scores = np.zeros(len(images))
    model.eval()
    with no_grad():
        if workers <= 1:
            for idx in chunks:
                scores[list(idx)] = _score_chunk(model, [names[i] for i in idx], [images[i] for i in idx],
                                                 n_patches, seed, tiled)
        else:
            with ThreadPoolExecutor(max_workers=workers) as executor:
                futures = {executor.submit(_score_chunk, model, [names[i] for i in idx],
                                           [images[i] for i in idx], n_patches, seed, tiled): idx
                           for idx in chunks}
                for future in as_completed(futures):
                    scores[list(futures[future])] = future.result()
    return scores


def score_stability(model: ModelParams, image: np.ndarray, n_patches: int, seed: int = 0,
                    repeats: int = 10) -> Tuple[float, float]:
    """Mean and variance of one image's score over independent patch samplings."""
    model.eval()
    scores = [score_image(model, image, n_patches, np.random.default_rng([seed, r])) for r in range(repeats)]
    return float(np.mean(scores)), float(np.var(scores))


# =============================================================================
# Reports
# =============================================================================

@dataclass
class EvalReport:
    rows: List[dict] = field(default_factory=list)
    skipped: Dict[str, int] = field(default_factory=dict)
    model_fingerprint: str = ""
    config_fingerprint: str = ""
    wall_clock: float = 0.0
    grid: Optional[pd.DataFrame] = None
    score_variance: Optional[float] = None

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=REPORT_COLUMNS)

    def mean_row(self) -> Optional[dict]:
        if len(self.rows) < 2:
            return None
        frame = self.to_frame()
        return {"dataset": "mean (unweighted)", "n_id": int(frame["n_id"].iloc[0]),
                "n_ood": int(frame["n_ood"].sum()), "auroc": float(frame["auroc"].mean()),
                "fpr95": float(frame["fpr95"].mean())}

    def write_csv(self, path: Union[str, Path]) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.6f")

    def format_table(self) -> str:
        frame = self.to_frame()
        mean = self.mean_row()
        if mean is not None:
            frame = pd.concat([frame, pd.DataFrame([mean])], ignore_index=True)
        lines = [frame.to_string(index=False, formatters={"auroc": "{:.3f}".format, "fpr95": "{:.3f}".format})]
        if self.grid is not None and not self.grid.empty:
            lines += ["", self.grid.to_string(index=False, formatters={"auroc": "{:.3f}".format,
                                                                        "fpr95": "{:.3f}".format})]
        return "\n".join(lines)

    def summary(self) -> dict:
        return {
            "datasets": self.rows,
            "mean": self.mean_row(),
            "skipped": self.skipped,
            "model_fingerprint": self.model_fingerprint,
            "config_fingerprint": self.config_fingerprint,
            "wall_clock": self.wall_clock,
            "score_variance": self.score_variance,
            "grid": None if self.grid is None else self.grid.to_dict(orient="records"),
        }


def config_fingerprint(config_text: str) -> str:
    return hashlib.sha256(config_text.encode("utf-8")).hexdigest()


def _metric_row(dataset: str, id_scores: np.ndarray, ood_scores: np.ndarray) -> dict:
    return {"dataset": dataset, "n_id": int(id_scores.size), "n_ood": int(ood_scores.size),
            "auroc": auroc(id_scores, ood_scores), "fpr95": fpr_at_95tpr(id_scores, ood_scores)}


def _load(directory, size: int, report: EvalReport) -> Tuple[List[str], List[np.ndarray]]:
    names, images, skipped = load_directory(directory, size)
    if skipped:
        report.skipped[str(directory)] = len(skipped)
    if not images:
        raise ValueError(f"No readable images in {directory}")
    return names, images


def run_eval(model: ModelParams, id_dir, ood_dirs: Sequence, n_patches: int = 64, seed: int = 0,
             tiled: bool = False, workers: int = 1, config_text: str = "",
             stability_images: int = 3) -> EvalReport:
    """One (auroc, fpr95) row per OOD directory against the shared ID scores."""
    start = time.time()
    report = EvalReport(model_fingerprint=model.fingerprint(), config_fingerprint=config_fingerprint(config_text))
    size = model.cfg.image_size
    id_names, id_images = _load(id_dir, size, report)
    id_scores = score_images(model, id_names, id_images, n_patches, seed, tiled, workers)
    logging.info(f"Scored {len(id_scores)} ID images from {id_dir} (mean anomaly {id_scores.mean():.4f})")

    for ood_dir in ood_dirs:
        names, images = _load(ood_dir, size, report)
        ood_scores = score_images(model, names, images, n_patches, seed, tiled, workers)
        row = _metric_row(str(ood_dir), id_scores, ood_scores)
        report.rows.append(row)
        logging.info(f"{ood_dir}: AUROC {row['auroc']:.4f}, FPR95 {row['fpr95']:.4f} ({row['n_ood']} images)")

    if stability_images:
        variances = [score_stability(model, img, n_patches, seed)[1] for img in id_images[:stability_images]]
        report.score_variance = float(np.mean(variances))
    report.wall_clock = time.time() - start
    return report


def _load_grid(manifest_dir: Path, size: int, report: EvalReport) -> List[Tuple[str, List[str], List[np.ndarray]]]:
    """(kind/severity, names, images) per manifest cell; grid images must already be size x size."""
    manifest = read_manifest(manifest_dir)
    cells = []
    for (kind, severity), entries in manifest.groupby(["kind", "severity"], sort=True):
        names, images = [], []
        for rel in entries["path"]:
            try:
                image = load_image_uint8(manifest_dir / rel)
            except ImageFormatError as e:
                logging.warning(f"Skipping {rel}: {e}")
                report.skipped[f"{kind}/{severity}"] = report.skipped.get(f"{kind}/{severity}", 0) + 1
                continue
            if image.shape[:2] != (size, size):
                raise ValueError(f"{manifest_dir / rel} is {image.shape[1]}x{image.shape[0]} but the model "
                                 f"expects {size}x{size}; rebuild the grid with corrupt --size {size}")
            names.append(rel)
            images.append(image)
        if images:
            cells.append((f"{kind}/{severity}", names, images))
    return cells


def run_grid_eval(model: ModelParams, id_dir, manifest_dir, n_patches: int = 64, seed: int = 0,
                  tiled: bool = False, workers: int = 1, config_text: str = "") -> EvalReport:
    """Per (kind, severity) metrics from a corruption manifest, plus per-kind rows."""
    start = time.time()
    report = EvalReport(model_fingerprint=model.fingerprint(), config_fingerprint=config_fingerprint(config_text))
    size = model.cfg.image_size
    cells = _load_grid(Path(manifest_dir), size, report)
    id_names, id_images = _load(id_dir, size, report)
    id_scores = score_images(model, id_names, id_images, n_patches, seed, tiled, workers)

    grid_rows = []
    for cell, names, images in cells:
        kind, severity = cell.rsplit("/", 1)
        ood_scores = score_images(model, names, images, n_patches, seed, tiled, workers)
        row = _metric_row(cell, id_scores, ood_scores)
        grid_rows.append({"kind": kind, "severity": int(severity), **{k: row[k] for k in REPORT_COLUMNS[1:]}})
        logging.info(f"{kind} severity {severity}: AUROC {row['auroc']:.4f}, FPR95 {row['fpr95']:.4f}")

    report.grid = pd.DataFrame(grid_rows, columns=["kind", "severity", "n_id", "n_ood", "auroc", "fpr95"])
    for kind, rows in report.grid.groupby("kind", sort=True):
        report.rows.append({"dataset": kind, "n_id": int(rows["n_id"].iloc[0]), "n_ood": int(rows["n_ood"].sum()),
                            "auroc": float(rows["auroc"].mean()), "fpr95": float(rows["fpr95"].mean())})
    report.wall_clock = time.time() - start
    return report


def patch_count_sweep(model: ModelParams, id_dir, ood_dirs: Sequence, counts: Sequence[int],
                      seed: int = 0, workers: int = 1, grid_dir=None) -> pd.DataFrame:
    """AUROC / FPR95 per (n_patches, dataset), with an unweighted mean row per count.

    With grid_dir every (kind, severity) cell of the corruption manifest is one dataset.
    """
    if not ood_dirs and grid_dir is None:
        raise ValueError("patch count sweep needs OOD directories or a corruption grid")
    holder = EvalReport()
    size = model.cfg.image_size
    ood_sets = [(str(d),) + _load(d, size, holder) for d in ood_dirs]
    if grid_dir is not None:
        ood_sets += _load_grid(Path(grid_dir), size, holder)
    id_names, id_images = _load(id_dir, size, holder)
    rows = []
    for n in counts:
        id_scores = score_images(model, id_names, id_images, n, seed, workers=workers)
        per_count = [_metric_row(name, id_scores, score_images(model, names, images, n, seed, workers=workers))
                     for name, names, images in ood_sets]
        rows += [{"n_patches": n, **r} for r in per_count]
        rows.append({"n_patches": n, "dataset": "mean (unweighted)", "n_id": len(id_scores),
                     "n_ood": sum(r["n_ood"] for r in per_count),
                     "auroc": float(np.mean([r["auroc"] for r in per_count])),
                     "fpr95": float(np.mean([r["fpr95"] for r in per_count]))})
        logging.info(f"N={n}: mean AUROC {rows[-1]['auroc']:.4f}")
    return pd.DataFrame(rows, columns=["n_patches"] + REPORT_COLUMNS)


# =============================================================================
# Batch-statistics bias
# =============================================================================

def score_homogeneous_batches(model: ModelParams, images: Sequence[np.ndarray], batch_size: int,
                              seed: int = 0) -> Tuple[np.ndarray, bool]:
    """Whole-image scores in batches of one set only; returns (scores, final batch was short)."""
    order = np.random.default_rng(seed).permutation(len(images))
    scores = np.zeros(len(images))
    with no_grad():
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            batch = whole_image_batch([images[i] for i in idx], model.cfg.patch_size)
            realness = discriminate(model, batch.data, GroupLayout(len(idx), 1))
            scores[idx] = 1.0 - realness.data.reshape(-1).astype(np.float64)
    return scores, len(images) % batch_size != 0


def batch_bias_experiment(model: ModelParams, id_dir, ood_dirs: Sequence, batch_sizes: Sequence[int],
                          modes: Sequence[str] = ("learned", "batch"), seed: int = 0) -> pd.DataFrame:
    """(mode, batch size, dataset) grid of AUROC / FPR95 with learned or current-batch statistics."""
    holder = EvalReport()
    size = model.cfg.image_size
    _, id_images = _load(id_dir, size, holder)
    ood_sets = [(str(d), _load(d, size, holder)[1]) for d in ood_dirs]
    disc_layers = model.norm_layers("discriminator")
    model.eval()
    rows = []
    for mode in modes:
        if mode not in STAT_MODES:
            raise ValueError(f"Unknown statistics mode '{mode}'. Use learned or batch")
        with inference_statistics(disc_layers, mode):
            for bs in batch_sizes:
                if bs < 1:
                    raise ValueError(f"batch size must be >= 1, got {bs}")
                id_scores, id_short = score_homogeneous_batches(model, id_images, bs, seed)
                per_size = []
                for name, images in ood_sets:
                    ood_scores, ood_short = score_homogeneous_batches(model, images, bs, seed)
                    per_size.append({"mode": STAT_MODES[mode], "batch_size": bs,
                                     **_metric_row(name, id_scores, ood_scores),
                                     "truncated_final_batch": id_short or ood_short})
                rows += per_size
                if len(per_size) > 1:
                    rows.append({"mode": STAT_MODES[mode], "batch_size": bs, "dataset": "mean (unweighted)",
                                 "n_id": len(id_scores), "n_ood": sum(r["n_ood"] for r in per_size),
                                 "auroc": float(np.mean([r["auroc"] for r in per_size])),
                                 "fpr95": float(np.mean([r["fpr95"] for r in per_size])),
                                 "truncated_final_batch": any(r["truncated_final_batch"] for r in per_size)})
                logging.info(f"{STAT_MODES[mode]} BS={bs}: " + ", ".join(
                    f"{r['auroc'] * 100:.1f}/{r['fpr95'] * 100:.1f}" for r in per_size))
    return pd.DataFrame(rows, columns=["mode", "batch_size"] + REPORT_COLUMNS + ["truncated_final_batch"])


# =============================================================================
# Latency and features
# =============================================================================

def bench_latency(model: ModelParams, n_runs: int = 1000, n_patches: int = 64, seed: int = 0,
                  image: Optional[np.ndarray] = None, warmup: int = 10) -> Dict[str, Optional[float]]:
    """Per-image latency in milliseconds over n_runs single-image scorings."""
    report: Dict[str, Optional[float]] = {"n_runs": n_runs, "n_patches": n_patches, "mean_ms": None,
                                          "std_ms": None, "min_ms": None, "p50_ms": None,
                                          "p95_ms": None, "max_ms": None}
    if n_runs <= 0:
        return report
    rng = np.random.default_rng(seed)
    if image is None:
        size = model.cfg.image_size
        image = rng.integers(0, 256, size=(size, size, model.cfg.in_channels), dtype=np.uint8)
    model.eval()
    for _ in range(warmup):
        score_image(model, image, n_patches, rng)
    timings = np.zeros(n_runs)
    for i in range(n_runs):
        start = time.perf_counter()
        score_image(model, image, n_patches, rng)
        timings[i] = (time.perf_counter() - start) * 1000.0
    report.update(mean_ms=float(timings.mean()), std_ms=float(timings.std()), min_ms=float(timings.min()),
                  p50_ms=float(np.percentile(timings, 50)), p95_ms=float(np.percentile(timings, 95)),
                  max_ms=float(timings.max()))
    return report


def export_features(model: ModelParams, names: Sequence[str], images: Sequence[np.ndarray],
                    n_patches: int = 64, seed: int = 0, out_path: Optional[Union[str, Path]] = None,
                    tiled: bool = False) -> pd.DataFrame:
    """One row per image: id plus the patch-mean of the discriminator's penultimate activations."""
    model.eval()
    rows = []
    with no_grad():
        for name, image in zip(names, images):
            batch = make_inference_groups(image, n_patches, model.cfg.patch_size, image_rng(seed, name), tiled, name)
            feats = penultimate_features(model, batch).data.astype(np.float64)
            rows.append(feats.reshape(feats.shape[0], -1).mean(axis=0))
    width = rows[0].size if rows else 0
    frame = pd.DataFrame(np.asarray(rows).reshape(len(rows), width), columns=[f"f{i}" for i in range(width)])
    frame.insert(0, "image", list(names))
    if out_path is not None:
        frame.to_csv(out_path, index=False)
        logging.info(f"Wrote {len(frame)} feature rows of width {width} to {out_path}")
    return frame
