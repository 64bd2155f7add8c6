import json

import numpy as np
import pytest

from corruptions import build_corrupted_set
from evaluation import (EvalReport, auroc, batch_bias_experiment, bench_latency, export_features,
                        fpr_at_95tpr, patch_count_sweep, run_eval, run_grid_eval, score_homogeneous_batches,
                        score_images, score_stability)
from image_io import load_directory
from models import build_model
from normalization import NormConfig
from tensor_engine import ContractError
from tests.conftest import write_images
from training import TrainConfig, fit


def brute_auroc(id_scores, ood_scores):
    diff = ood_scores[:, None] - id_scores[None, :]
    return (np.count_nonzero(diff > 0) + 0.5 * np.count_nonzero(diff == 0)) / diff.size


def brute_fpr95(id_scores, ood_scores, tpr=0.95):
    admissible = [t for t in np.unique(ood_scores) if np.count_nonzero(ood_scores >= t) / ood_scores.size >= tpr]
    threshold = max(admissible)
    return np.count_nonzero(id_scores >= threshold) / id_scores.size


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("id_scores,ood_scores,expected", [
    ([0.1, 0.2], [0.8, 0.9], 1.0),
    ([0.1, 0.4], [0.3, 0.5], 0.75),
    ([0.3, 0.3, 0.7], [0.3, 0.3, 0.7], 0.5),
    ([0.9, 0.8], [0.1, 0.2], 0.0),
])
def test_auroc_examples(id_scores, ood_scores, expected):
    assert auroc(id_scores, ood_scores) == pytest.approx(expected)


def test_fpr95_examples():
    assert fpr_at_95tpr([0.1, 0.2, 0.3], [0.8, 0.9]) == 0.0
    same = np.linspace(0, 1, 20)
    assert fpr_at_95tpr(same, same) == pytest.approx(0.95)
    assert fpr_at_95tpr([0.1, 0.5, 0.6, 0.9], [0.55]) == pytest.approx(0.5)


def test_metrics_reject_empty_sets():
    with pytest.raises(ValueError):
        auroc([], [0.5])
    with pytest.raises(ValueError):
        fpr_at_95tpr([0.5], [])


def test_metrics_match_pair_counting_oracle():
    rng = np.random.default_rng(2024)
    for trial in range(1000):
        n_id, n_ood = rng.integers(1, 201, size=2)
        # small integer alphabet forces ties and duplicates
        levels = int(rng.integers(2, 30))
        id_scores = rng.integers(0, levels, size=n_id).astype(np.float64)
        ood_scores = (rng.integers(0, levels, size=n_ood) + rng.integers(0, 3)).astype(np.float64)
        assert abs(auroc(id_scores, ood_scores) - brute_auroc(id_scores, ood_scores)) <= 1e-12, trial
        assert abs(fpr_at_95tpr(id_scores, ood_scores) - brute_fpr95(id_scores, ood_scores)) <= 1e-12, trial


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------

def test_scores_do_not_depend_on_pooling(micro_model, image_dir):
    names, images, _ = load_directory(image_dir, 16)
    serial = score_images(micro_model, names, images, n_patches=4, seed=3, workers=1, groups_per_batch=1)
    pooled = score_images(micro_model, names, images, n_patches=4, seed=3, workers=3, groups_per_batch=4)
    np.testing.assert_allclose(serial, pooled, atol=1e-5)
    assert np.all((serial >= 0) & (serial <= 1))


def test_score_images_of_nothing(micro_model):
    assert score_images(micro_model, [], []).size == 0


def test_score_stability_reports_variance(micro_model, image_dir):
    _, images, _ = load_directory(image_dir, 16)
    mean, var = score_stability(micro_model, images[0], n_patches=4, repeats=5)
    assert 0.0 <= mean <= 1.0
    assert var >= 0.0


def test_same_directory_gives_chance_auroc(micro_model, image_dir):
    report = run_eval(micro_model, image_dir, [image_dir], n_patches=4, seed=0, stability_images=1)
    assert report.rows[0]["auroc"] == pytest.approx(0.5, abs=1e-12)
    assert report.rows[0]["n_id"] == report.rows[0]["n_ood"] == 6
    assert report.score_variance is not None
    assert report.model_fingerprint == micro_model.fingerprint()


def test_report_mean_row_and_outputs(micro_model, image_dir, tmp_path):
    other = tmp_path / "other"
    write_images(other, 4, seed=5)
    report = run_eval(micro_model, image_dir, [image_dir, other], n_patches=4, config_text="[train]\nseed = 0\n",
                      stability_images=0)
    mean = report.mean_row()
    assert mean["dataset"] == "mean (unweighted)"
    assert mean["auroc"] == pytest.approx(np.mean([r["auroc"] for r in report.rows]))
    assert "mean (unweighted)" in report.format_table()
    report.write_csv(tmp_path / "report.csv")
    assert (tmp_path / "report.csv").read_text().startswith("dataset,n_id,n_ood,auroc,fpr95")
    json.dumps(report.summary())


def test_single_dataset_has_no_mean_row():
    report = EvalReport(rows=[{"dataset": "a", "n_id": 1, "n_ood": 1, "auroc": 0.5, "fpr95": 1.0}])
    assert report.mean_row() is None


def test_unreadable_files_are_counted(micro_model, image_dir):
    (image_dir / "broken.png").write_bytes(b"garbage")
    report = run_eval(micro_model, image_dir, [image_dir], n_patches=2, stability_images=0)
    assert report.skipped == {str(image_dir): 1}
    assert report.rows[0]["n_id"] == 6


def test_empty_ood_directory(micro_model, image_dir, tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(ValueError):
        run_eval(micro_model, image_dir, [tmp_path / "empty"], n_patches=2, stability_images=0)


def test_grid_eval_rows(micro_model, image_dir, tmp_path):
    build_corrupted_set(image_dir, ["gaussian_noise", "contrast"], [1, 5], seed=0, out_dir=tmp_path / "grid",
                        image_size=16)
    report = run_grid_eval(micro_model, image_dir, tmp_path / "grid", n_patches=2)
    assert list(report.grid.columns) == ["kind", "severity", "n_id", "n_ood", "auroc", "fpr95"]
    assert len(report.grid) == 4
    assert [r["dataset"] for r in report.rows] == ["contrast", "gaussian_noise"]
    assert report.rows[0]["n_ood"] == 12
    json.dumps(report.summary())


def test_patch_count_sweep_shape(micro_model, image_dir):
    frame = patch_count_sweep(micro_model, image_dir, [image_dir], counts=[2, 4])
    assert list(frame["n_patches"]) == [2, 2, 4, 4]
    assert list(frame["dataset"])[1::2] == ["mean (unweighted)"] * 2
    np.testing.assert_allclose(frame["auroc"], 0.5)


def test_grid_at_another_size_is_rejected(micro_model, image_dir, tmp_path):
    build_corrupted_set(image_dir, ["gaussian_noise"], [3], seed=0, out_dir=tmp_path / "grid", image_size=32)
    with pytest.raises(ValueError, match="expects 16x16"):
        run_grid_eval(micro_model, image_dir, tmp_path / "grid", n_patches=2)
    with pytest.raises(ValueError, match="corrupt --size 16"):
        patch_count_sweep(micro_model, image_dir, [], counts=[2], grid_dir=tmp_path / "grid")


def test_patch_count_sweep_over_grid_cells(micro_model, image_dir, tmp_path):
    build_corrupted_set(image_dir, ["gaussian_noise", "pixelate"], [1, 5], seed=0, out_dir=tmp_path / "grid",
                        image_size=16)
    frame = patch_count_sweep(micro_model, image_dir, [], counts=[2, 4], grid_dir=tmp_path / "grid")
    assert len(frame) == 2 * (4 + 1)
    assert list(frame["dataset"])[:5] == ["gaussian_noise/1", "gaussian_noise/5", "pixelate/1", "pixelate/5",
                                          "mean (unweighted)"]
    assert frame["auroc"].notna().all() and np.isfinite(frame["fpr95"]).all()
    assert (frame["n_ood"][frame["dataset"] != "mean (unweighted)"] == 6).all()


def test_patch_count_sweep_needs_ood_data(micro_model, image_dir):
    with pytest.raises(ValueError, match="OOD directories or a corruption grid"):
        patch_count_sweep(micro_model, image_dir, [], counts=[2])


# ---------------------------------------------------------------------------
# Batch-statistics bias
# ---------------------------------------------------------------------------

def test_homogeneous_batches_flag_short_final_batch(micro_model, image_dir):
    _, images, _ = load_directory(image_dir, 16)
    scores, short = score_homogeneous_batches(micro_model, images, batch_size=4)
    assert scores.shape == (6,) and short
    _, short = score_homogeneous_batches(micro_model, images, batch_size=3)
    assert not short
    _, short = score_homogeneous_batches(micro_model, images, batch_size=50)
    assert short


def test_batch_mode_grid_columns(micro_model, image_dir, tmp_path):
    other = tmp_path / "other"
    write_images(other, 6, seed=8)
    frame = batch_bias_experiment(micro_model, image_dir, [other, image_dir], batch_sizes=[2, 4], modes=("batch",))
    assert list(frame.columns) == ["mode", "batch_size", "dataset", "n_id", "n_ood", "auroc", "fpr95",
                                   "truncated_final_batch"]
    assert set(frame["mode"]) == {"batch_stats"}
    assert len(frame) == 2 * 3
    assert list(frame.loc[frame["batch_size"] == 4, "truncated_final_batch"]) == [True, True, True]


def test_learned_statistics_need_a_tracked_discriminator(micro_model, image_dir):
    with pytest.raises(ContractError):
        batch_bias_experiment(micro_model, image_dir, [image_dir], batch_sizes=[2], modes=("learned",))


def test_learned_statistics_do_not_depend_on_batch_size(micro_cfg, image_dir, tmp_path):
    model = build_model(micro_cfg, NormConfig(disc_track_running_stats=True), seed=0)
    _, images, _ = load_directory(image_dir, 16)
    fit(images, model, TrainConfig(lr=1e-3, batch_images=2, patches_per_image=4, epochs=1))
    other = tmp_path / "other"
    write_images(other, 5, seed=8)
    frame = batch_bias_experiment(model, image_dir, [other], batch_sizes=[1, 3, 6], modes=("learned",))
    assert set(frame["mode"]) == {"learned_stats"}
    assert np.ptp(frame["auroc"].to_numpy()) <= 1e-6


def test_unknown_statistics_mode(micro_model, image_dir):
    with pytest.raises(ValueError):
        batch_bias_experiment(micro_model, image_dir, [image_dir], batch_sizes=[2], modes=("running",))


# ---------------------------------------------------------------------------
# Latency and features
# ---------------------------------------------------------------------------

def test_bench_with_no_runs():
    report = bench_latency(None, n_runs=0)
    assert report["n_runs"] == 0
    assert report["mean_ms"] is None and report["p95_ms"] is None


def test_bench_reports_positive_latency(micro_model):
    report = bench_latency(micro_model, n_runs=3, n_patches=4, warmup=1)
    assert report["mean_ms"] > 0
    assert report["min_ms"] <= report["p50_ms"] <= report["max_ms"]


def test_feature_export_rows(micro_model, micro_cfg, image_dir, tmp_path):
    names, images, _ = load_directory(image_dir, 16)
    frame = export_features(micro_model, ["a.png", "a.png"], [images[0], images[0]], n_patches=4, seed=1,
                            out_path=tmp_path / "features.csv")
    assert list(frame.columns) == ["image"] + [f"f{i}" for i in range(micro_cfg.flat_features)]
    np.testing.assert_array_equal(frame.iloc[0, 1:].to_numpy(), frame.iloc[1, 1:].to_numpy())
    assert (tmp_path / "features.csv").exists()
