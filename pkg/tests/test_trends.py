"""Desk-scale training trends: severity, patch count, normalization kind, batch statistics.

Each model here trains for tens of minutes on CPU; run with `pytest -m slow`.
"""

from dataclasses import replace

import numpy as np
import pytest

from corruptions import SEVERITIES, build_corrupted_set
from evaluation import batch_bias_experiment, patch_count_sweep, run_grid_eval
from image_io import load_directory
from models import build_model
from run_config import preset
from synth_dataset import synth_dataset
from training import fit

pytestmark = pytest.mark.slow

TOLERANCE = 0.02
GRID_KINDS = ["gaussian_noise", "gaussian_blur"]


def train_model(cfg, train_dir):
    _, images, _ = load_directory(train_dir, cfg.model.image_size)
    model = build_model(cfg.model, cfg.norm, seed=cfg.train.seed)
    fit(images, model, cfg.train, cfg.weights)
    return model


def non_decreasing(values, tolerance=TOLERANCE):
    return all(b >= a - tolerance for a, b in zip(values, values[1:]))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("trends")
    synth_dataset(root / "train", 2000, seed=0, size=256)
    synth_dataset(root / "test", 200, seed=1, size=256)
    build_corrupted_set(root / "test", GRID_KINDS, SEVERITIES, seed=0, out_dir=root / "grid", image_size=256)
    return root


@pytest.fixture(scope="module")
def desk_model(workspace):
    return train_model(preset("desk"), workspace / "train")


@pytest.fixture(scope="module")
def desk_grid(desk_model, workspace):
    return run_grid_eval(desk_model, workspace / "test", workspace / "grid", n_patches=64).grid


@pytest.mark.parametrize("kind", GRID_KINDS)
def test_auroc_grows_with_severity(desk_grid, kind):
    aurocs = list(desk_grid[desk_grid["kind"] == kind].sort_values("severity")["auroc"])
    assert len(aurocs) == len(SEVERITIES)
    assert non_decreasing(aurocs), aurocs
    assert aurocs[-1] >= aurocs[0] + 0.05
    assert aurocs[-1] >= 0.80


def test_more_patches_do_not_hurt(desk_model, workspace):
    frame = patch_count_sweep(desk_model, workspace / "test", [], [4, 64], grid_dir=workspace / "grid")
    means = frame[frame["dataset"] == "mean (unweighted)"].set_index("n_patches")["auroc"]
    assert means[64] >= means[4] - 0.01, means.to_dict()


def test_batch_statistics_beat_instance_and_group_norm(desk_grid, workspace):
    base = preset("desk")
    means = {base.model.norm_kind: desk_grid["auroc"].mean()}
    for norm_kind in ("instance", "group"):
        cfg = replace(base, model=replace(base.model, norm_kind=norm_kind))
        model = train_model(cfg, workspace / "train")
        grid = run_grid_eval(model, workspace / "test", workspace / "grid", n_patches=64).grid
        means[norm_kind] = grid["auroc"].mean()
    assert means[base.model.norm_kind] >= means["instance"] - TOLERANCE, means
    assert means["instance"] >= means["group"] - TOLERANCE, means


def test_batch_statistics_beat_learned_statistics(workspace):
    cfg = preset("desk-full")
    model = train_model(cfg, workspace / "train")
    build_corrupted_set(workspace / "test", ["gaussian_noise"], [3], seed=0, out_dir=workspace / "grid_full",
                        image_size=cfg.model.image_size)
    frame = batch_bias_experiment(model, workspace / "test", [workspace / "grid_full" / "gaussian_noise" / "3"],
                                  [1, 16, 32, 64])
    by_mode = {mode: rows.set_index("batch_size")["auroc"] for mode, rows in frame.groupby("mode")}
    batch, learned = by_mode["batch_stats"], by_mode["learned_stats"]
    for size in (16, 32, 64):
        assert batch[size] >= learned[size] + 0.05, (batch.to_dict(), learned.to_dict())
    assert non_decreasing([batch[size] for size in (1, 16, 32, 64)]), batch.to_dict()
    assert np.isfinite(frame["fpr95"]).all()
