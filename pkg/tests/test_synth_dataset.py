import json

import numpy as np
import pandas as pd
import pytest

from image_io import load_image_uint8
from synth_dataset import image_stream, power_law_field, synth_dataset, synth_image


def test_field_is_standardized(rng):
    field = power_law_field(rng, 64)
    assert field.shape == (64, 64)
    assert abs(field.mean()) < 1e-9
    assert field.std() == pytest.approx(1.0, rel=1e-6)


def test_field_power_falls_with_frequency(rng):
    power = np.zeros((64, 33))
    for _ in range(20):
        power += np.abs(np.fft.rfft2(power_law_field(rng, 64))) ** 2
    assert power[1:4, 1:4].mean() > 10 * power[20:30, 20:30].mean()


def test_image_depends_only_on_seed_and_index():
    a = synth_image(image_stream(3, 7), 32)
    b = synth_image(image_stream(3, 7), 32)
    c = synth_image(image_stream(3, 8), 32)
    assert a.shape == (32, 32, 3) and a.dtype == np.uint8
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_dataset_files_and_manifest(tmp_path):
    manifest = synth_dataset(tmp_path / "synth", 5, seed=2, size=24, max_workers=2)
    assert list(manifest["path"]) == [f"synth_{i:05d}.png" for i in range(5)]
    assert len(pd.read_csv(tmp_path / "synth" / "manifest.csv")) == 5
    summary = json.loads((tmp_path / "synth" / "synth_summary.json").read_text())
    assert summary["written"] == 5 and summary["failed"] == 0
    stored = load_image_uint8(tmp_path / "synth" / "synth_00003.png")
    np.testing.assert_array_equal(stored, synth_image(image_stream(2, 3), 24))


def test_dataset_is_reproducible(tmp_path):
    synth_dataset(tmp_path / "a", 3, seed=1, size=16, max_workers=1)
    synth_dataset(tmp_path / "b", 3, seed=1, size=16, max_workers=3)
    for i in range(3):
        name = f"synth_{i:05d}.png"
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_dataset_needs_images(tmp_path):
    with pytest.raises(ValueError):
        synth_dataset(tmp_path, 0)


@pytest.mark.slow
def test_independent_draws_share_a_distribution():
    first = np.array([synth_image(image_stream(0, i), 64).mean() for i in range(200)])
    second = np.array([synth_image(image_stream(0, i), 64).mean() for i in range(200, 400)])
    spread = np.sqrt(first.var(ddof=1) / first.size + second.var(ddof=1) / second.size)
    assert abs(first.mean() - second.mean()) < 4 * spread


def pixel_cdf(seed, n, size=32):
    counts = np.zeros(256)
    for i in range(n):
        counts += np.bincount(synth_image(image_stream(seed, i), size).reshape(-1), minlength=256)
    return np.cumsum(counts) / counts.sum()


@pytest.mark.slow
def test_pixel_histogram_is_stable_across_seeds():
    distance = np.abs(pixel_cdf(0, 1000) - pixel_cdf(1, 1000)).max()
    assert distance < 0.05
