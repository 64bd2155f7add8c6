#!/usr/bin/env python3
"""
Patching Strategy
Random training crops pooled into one statistics group, per-image inference
groups of N patches, and the mean-realness anomaly score.
"""

import zlib
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import cv2
import numpy as np

from normalization import GroupLayout
from tensor_engine import Tensor


@dataclass
class PatchBatch:
    """(G*N) x C x p x p patches; group g is the contiguous run [g*N, (g+1)*N)."""
    data: Tensor
    layout: GroupLayout
    source_ids: Tuple[str, ...]

    def __post_init__(self):
        self.layout.check(self.data.shape[0])
        if len(self.source_ids) != self.layout.group_count:
            raise ValueError(f"{len(self.source_ids)} source ids for {self.layout.group_count} groups")

    def __len__(self):
        return self.data.shape[0]


def image_rng(seed: int, name: str) -> np.random.Generator:
    """Per-image stream derived from (seed, file name) so pooled and serial runs agree."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode("utf-8"))])


def standardize_image(image: np.ndarray, size: int = 256) -> np.ndarray:
    """Resize the short side to `size` (bilinear) and center-crop to size x size."""
    h, w = image.shape[:2]
    if (h, w) != (size, size):
        scale = size / min(h, w)
        new_w, new_h = max(size, round(w * scale)), max(size, round(h * scale))
        image = cv2.resize(image, (new_w, new_h), interpolation=cv2.INTER_LINEAR)
        if image.ndim == 2:
            image = image[:, :, None]
        top, left = (new_h - size) // 2, (new_w - size) // 2
        image = image[top:top + size, left:left + size]
    return np.ascontiguousarray(image)


def to_model_range(patches: np.ndarray) -> np.ndarray:
    """(N, p, p, C) in [0, 1] or uint8 -> (N, C, p, p) in [-1, 1]."""
    if patches.dtype == np.uint8:
        patches = patches.astype(np.float32) / 255.0
    return np.ascontiguousarray(patches.transpose(0, 3, 1, 2) * 2.0 - 1.0)


def _check_fits(image: np.ndarray, patch_size: int) -> None:
    if image.shape[0] < patch_size or image.shape[1] < patch_size:
        raise ValueError(f"image {image.shape[0]}x{image.shape[1]} is smaller than patch {patch_size}")


def random_corners(image: np.ndarray, n: int, patch_size: int, rng: np.random.Generator) -> np.ndarray:
    _check_fits(image, patch_size)
    h, w = image.shape[:2]
    rows = rng.integers(0, h - patch_size + 1, size=n)
    cols = rng.integers(0, w - patch_size + 1, size=n)
    return np.stack([rows, cols], axis=1)


def tiled_corners(image: np.ndarray, n: int, patch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Non-overlapping grid in raster order, topped up with random crops to n."""
    _check_fits(image, patch_size)
    h, w = image.shape[:2]
    grid = np.array([(r, c) for r in range(0, h - patch_size + 1, patch_size)
                     for c in range(0, w - patch_size + 1, patch_size)])
    if n <= len(grid):
        return grid[:n]
    return np.concatenate([grid, random_corners(image, n - len(grid), patch_size, rng)])


def crop(image: np.ndarray, corners: np.ndarray, patch_size: int) -> np.ndarray:
    return np.stack([image[r:r + patch_size, c:c + patch_size] for r, c in corners])


def sample_train_patches(images: Sequence[np.ndarray], patches_per_image: int, patch_size: int,
                         rng: np.random.Generator) -> PatchBatch:
    """Uniform random crops (with replacement) interleaved into one statistics pool."""
    if not images:
        raise ValueError("sample_train_patches needs at least one image")
    per_image = [crop(img, random_corners(img, patches_per_image, patch_size, rng), patch_size)
                 for img in images]
    # Interleave: patch k of every image, then patch k+1, ...
    stacked = np.stack(per_image, axis=1).reshape((-1,) + per_image[0].shape[1:])
    data = Tensor(to_model_range(stacked))
    return PatchBatch(data, GroupLayout(group_size=len(stacked), group_count=1), ("train",))


def whole_image_batch(images: Sequence[np.ndarray], size: int) -> PatchBatch:
    """Full images resized to `size` as a single statistics pool."""
    resized = np.stack([standardize_image(img, size) for img in images])
    return PatchBatch(Tensor(to_model_range(resized)), GroupLayout(len(resized), 1), ("train",))


def make_inference_groups(image: np.ndarray, n_patches: int, patch_size: int,
                          rng: np.random.Generator, tiled: bool = False,
                          source_id: str = "image") -> PatchBatch:
    """N crops of one image forming one group."""
    if n_patches < 1:
        raise ValueError(f"n_patches must be >= 1, got {n_patches}")
    corners = (tiled_corners if tiled else random_corners)(image, n_patches, patch_size, rng)
    data = Tensor(to_model_range(crop(image, corners, patch_size)))
    return PatchBatch(data, GroupLayout(group_size=n_patches, group_count=1), (source_id,))


def concat_groups(batches: Sequence[PatchBatch]) -> PatchBatch:
    """Stack single-size groups into one multi-group batch (for throughput)."""
    if not batches:
        raise ValueError("concat_groups needs at least one batch")
    size = batches[0].layout.group_size
    if any(b.layout.group_size != size for b in batches):
        raise ValueError("all groups must hold the same number of patches")
    data = Tensor(np.concatenate([b.data.data for b in batches]))
    ids: List[str] = [sid for b in batches for sid in b.source_ids]
    return PatchBatch(data, GroupLayout(group_size=size, group_count=len(ids)), tuple(ids))


def image_anomaly_score(patch_scores) -> float:
    """1 - mean realness; higher means more out-of-distribution."""
    scores = np.asarray(patch_scores.data if isinstance(patch_scores, Tensor) else patch_scores,
                        dtype=np.float64).reshape(-1)
    if scores.size == 0:
        raise ValueError("image_anomaly_score needs at least one patch score")
    return float(1.0 - scores.mean())


def group_scores(realness: np.ndarray, layout: GroupLayout) -> np.ndarray:
    """Anomaly score per group of a scored multi-group batch."""
    per_group = np.asarray(realness, dtype=np.float64).reshape(layout.group_count, layout.group_size)
    return 1.0 - per_group.mean(axis=1)
