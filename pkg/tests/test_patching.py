import numpy as np
import pytest

from normalization import GroupLayout
from patching import (PatchBatch, concat_groups, crop, group_scores, image_anomaly_score, image_rng,
                      make_inference_groups, random_corners, sample_train_patches, standardize_image,
                      tiled_corners, to_model_range, whole_image_batch)
from tensor_engine import ShapeError, Tensor


def gradient_image(h, w):
    """uint8 image whose pixel (r, c) encodes its own position."""
    rows, cols = np.mgrid[0:h, 0:w]
    return np.stack([rows, cols, np.zeros_like(rows)], axis=-1).astype(np.uint8)


def test_standardize_center_crops_the_long_side():
    image = np.zeros((40, 60, 3), dtype=np.uint8)
    image[:, 10:50] = 255
    out = standardize_image(image, 40)
    assert out.shape == (40, 40, 3)
    assert np.all(out == 255)


def test_standardize_resizes_short_side():
    out = standardize_image(np.full((20, 30, 3), 7, dtype=np.uint8), 10)
    assert out.shape == (10, 10, 3)
    assert np.all(out == 7)


def test_standardize_keeps_matching_images():
    image = gradient_image(16, 16)
    np.testing.assert_array_equal(standardize_image(image, 16), image)


def test_to_model_range_maps_uint8_to_unit_interval():
    out = to_model_range(np.array([[[[0, 255, 51]]]], dtype=np.uint8))
    assert out.shape == (1, 3, 1, 1)
    np.testing.assert_allclose(out.reshape(-1), [-1.0, 1.0, -0.6], atol=1e-6)


def test_random_corners_stay_inside(rng):
    corners = random_corners(np.zeros((20, 30, 3)), 500, 8, rng)
    assert corners[:, 0].min() >= 0 and corners[:, 0].max() <= 12
    assert corners[:, 1].min() >= 0 and corners[:, 1].max() <= 22


def test_patch_larger_than_image(rng):
    with pytest.raises(ValueError):
        random_corners(np.zeros((6, 6, 3)), 1, 8, rng)


def test_tiled_corners_raster_order_then_random(rng):
    image = np.zeros((16, 16, 3))
    grid = tiled_corners(image, 4, 8, rng)
    np.testing.assert_array_equal(grid, [[0, 0], [0, 8], [8, 0], [8, 8]])
    assert len(tiled_corners(image, 6, 8, rng)) == 6


def test_crop_takes_the_requested_window():
    image = gradient_image(16, 16)
    patch = crop(image, np.array([[3, 5]]), 4)[0]
    assert patch[0, 0, 0] == 3 and patch[0, 0, 1] == 5
    assert patch.shape == (4, 4, 3)


def test_train_patches_form_one_interleaved_group(rng):
    images = [np.full((16, 16, 3), v, dtype=np.uint8) for v in (0, 255)]
    batch = sample_train_patches(images, 3, 8, rng)
    assert batch.layout == GroupLayout(group_size=6, group_count=1)
    assert batch.data.shape == (6, 3, 8, 8)
    firsts = batch.data.data[:, 0, 0, 0]
    np.testing.assert_allclose(firsts, [-1, 1, -1, 1, -1, 1])


def test_whole_image_batch_resizes(rng):
    batch = whole_image_batch([gradient_image(20, 24), gradient_image(30, 30)], 8)
    assert batch.data.shape == (2, 3, 8, 8)
    assert batch.layout.group_count == 1


def test_inference_group_is_one_image(rng):
    batch = make_inference_groups(gradient_image(32, 32), 5, 8, rng, source_id="a.png")
    assert batch.layout == GroupLayout(5, 1)
    assert batch.source_ids == ("a.png",)


def test_inference_groups_reject_zero_patches(rng):
    with pytest.raises(ValueError):
        make_inference_groups(gradient_image(16, 16), 0, 8, rng)


def test_concat_groups_keeps_order(rng):
    groups = [make_inference_groups(gradient_image(16, 16), 3, 8, rng, source_id=name) for name in "abc"]
    merged = concat_groups(groups)
    assert merged.layout == GroupLayout(3, 3)
    assert merged.source_ids == ("a", "b", "c")
    np.testing.assert_array_equal(merged.data.data[3:6], groups[1].data.data)


def test_concat_groups_needs_equal_sizes(rng):
    groups = [make_inference_groups(gradient_image(16, 16), n, 8, rng) for n in (2, 3)]
    with pytest.raises(ValueError):
        concat_groups(groups)


def test_patch_batch_validates_layout():
    with pytest.raises(ShapeError):
        PatchBatch(Tensor(np.zeros((5, 3, 8, 8))), GroupLayout(2, 2), ("a", "b"))
    with pytest.raises(ValueError):
        PatchBatch(Tensor(np.zeros((4, 3, 8, 8))), GroupLayout(2, 2), ("a",))


@pytest.mark.parametrize("realness,expected", [
    ([1.0, 1.0], 0.0),
    ([0.0, 0.0, 0.0], 1.0),
    ([0.2, 0.4, 0.9], 1.0 - 0.5),
])
def test_anomaly_score_is_one_minus_mean(realness, expected):
    assert image_anomaly_score(realness) == pytest.approx(expected)


def test_anomaly_score_needs_patches():
    with pytest.raises(ValueError):
        image_anomaly_score([])


def test_group_scores_split_by_layout():
    np.testing.assert_allclose(group_scores(np.array([1.0, 0.0, 0.5, 0.5]), GroupLayout(2, 2)), [0.5, 0.5])


def test_image_rng_depends_on_seed_and_name():
    draw = lambda seed, name: image_rng(seed, name).integers(0, 1 << 30)
    assert draw(0, "a.png") == draw(0, "a.png")
    assert draw(0, "a.png") != draw(0, "b.png")
    assert draw(0, "a.png") != draw(1, "a.png")
