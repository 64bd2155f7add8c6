#!/usr/bin/env python3
"""
Covariate-Shift Corruptions
Nine severity-graded corruption kinds (noise, blur, photometric, pixelation)
and a thread-pooled builder that materializes a kind x severity grid of a
clean image directory.

Severity tables below are calibration constants owned by this repository.
Every table is strictly monotone in distortion magnitude.
"""

import json
import logging
import math
import time
import zlib
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple, Union

import cv2
import numpy as np
import pandas as pd

from image_io import ImageFormatError, list_images, load_image, save_image
from patching import standardize_image

SEVERITIES = (1, 2, 3, 4, 5)

# kind -> magnitude per severity 1..5
SEVERITY_TABLES: Dict[str, Tuple] = {
    "gaussian_noise": (0.08, 0.12, 0.18, 0.26, 0.38),      # sigma on [0, 1] pixels
    "shot_noise": (60, 25, 12, 5, 3),                       # photon count lambda
    "impulse_noise": (0.03, 0.06, 0.09, 0.17, 0.27),       # salt-and-pepper fraction
    "gaussian_blur": (1, 2, 3, 4, 6),                       # sigma in pixels
    "defocus_blur": ((3, 0.1), (4, 0.5), (6, 0.5), (8, 0.5), (10, 0.5)),  # (disk radius, alias sigma)
    "contrast": (0.4, 0.3, 0.2, 0.1, 0.05),                 # factor
    "brightness": (0.1, 0.2, 0.3, 0.4, 0.5),                # HSV value offset
    "saturate": ((2, 0), (3, 0), (5, 0.1), (10, 0.15), (20, 0.2)),  # (HSV saturation gain, offset)
    "pixelate": (2, 3, 4, 6, 8),                            # block size in pixels
}
KINDS = tuple(SEVERITY_TABLES)
MANIFEST_COLUMNS = ["path", "kind", "severity", "source"]


class UnknownCorruptionError(ValueError):
    pass


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int

    def __post_init__(self):
        if self.kind not in SEVERITY_TABLES:
            raise UnknownCorruptionError(f"Unknown corruption kind '{self.kind}'. Available: {', '.join(KINDS)}")
        if self.severity not in SEVERITIES:
            raise ValueError(f"severity must be one of {SEVERITIES}, got {self.severity}")

    @property
    def magnitude(self):
        return SEVERITY_TABLES[self.kind][self.severity - 1]


def distortion_magnitude(kind: str, severity: int) -> float:
    """A scalar that grows with the amount of distortion of one table entry."""
    value = CorruptionSpec(kind, severity).magnitude
    if kind == "shot_noise":
        return 1.0 / value
    if kind == "contrast":
        return abs(1.0 - value)
    if kind in ("defocus_blur", "saturate"):
        return float(value[0])
    return float(value)


# =============================================================================
# Per-kind functions on H x W x C float images in [0, 1]
# =============================================================================

def _finish(out: np.ndarray, like: np.ndarray) -> np.ndarray:
    return np.clip(out, 0.0, 1.0).astype(like.dtype, copy=False)


def gaussian_noise(image: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma == 0:
        return image.copy()
    return _finish(image + rng.normal(0.0, sigma, size=image.shape), image)


def shot_noise(image: np.ndarray, lam: float, rng: np.random.Generator) -> np.ndarray:
    return _finish(rng.poisson(np.asarray(image, dtype=np.float64) * lam) / float(lam), image)


def impulse_noise(image: np.ndarray, amount: float, rng: np.random.Generator) -> np.ndarray:
    """Channel-independent salt and pepper, half of each."""
    out = np.array(image, copy=True)
    hit = rng.random(image.shape) < amount
    salt = rng.random(image.shape) < 0.5
    out[hit & salt] = 1.0
    out[hit & ~salt] = 0.0
    return out


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian truncated at radius ceil(3 sigma)."""
    if sigma == 0:
        return image.copy()
    radius = int(math.ceil(3 * sigma))
    kernel = cv2.getGaussianKernel(2 * radius + 1, sigma, ktype=cv2.CV_32F)
    src = np.ascontiguousarray(image, dtype=np.float32)
    out = cv2.sepFilter2D(src, -1, kernel, kernel, borderType=cv2.BORDER_REFLECT_101)
    return _finish(out.reshape(image.shape), image)


def disk_kernel(radius: int, alias_blur: float = 0.1) -> np.ndarray:
    """Uniform disk, lightly Gaussian-smoothed to soften aliasing; sums to 1."""
    half = max(8, radius)
    coords = np.arange(-half, half + 1)
    ksize = (3, 3) if radius <= 8 else (5, 5)
    xs, ys = np.meshgrid(coords, coords)
    disk = ((xs ** 2 + ys ** 2) <= radius ** 2).astype(np.float32)
    disk /= disk.sum()
    smoothed = cv2.GaussianBlur(disk, ksize=ksize, sigmaX=alias_blur)
    return smoothed / smoothed.sum()


def defocus_blur(image: np.ndarray, radius: int, alias_blur: float = 0.1) -> np.ndarray:
    src = np.ascontiguousarray(image, dtype=np.float32)
    out = cv2.filter2D(src, -1, disk_kernel(radius, alias_blur), borderType=cv2.BORDER_REFLECT_101)
    return _finish(out.reshape(image.shape), image)


def contrast(image: np.ndarray, factor: float) -> np.ndarray:
    """(x - mean) * c + mean with the per-channel spatial mean."""
    x = np.asarray(image, dtype=np.float64)
    means = x.mean(axis=(0, 1), keepdims=True)
    return _finish((x - means) * factor + means, image)


def _hsv(image: np.ndarray) -> np.ndarray:
    # float32 HSV: H in [0, 360), S and V in [0, 1]
    return cv2.cvtColor(np.ascontiguousarray(image, dtype=np.float32), cv2.COLOR_RGB2HSV)


def _rgb(hsv: np.ndarray) -> np.ndarray:
    return cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB)


def brightness(image: np.ndarray, delta: float) -> np.ndarray:
    hsv = _hsv(image)
    hsv[:, :, 2] = np.clip(hsv[:, :, 2] + delta, 0.0, 1.0)
    return _finish(_rgb(hsv), image)


def saturate(image: np.ndarray, gain: float, offset: float = 0.0) -> np.ndarray:
    hsv = _hsv(image)
    hsv[:, :, 1] = np.clip(hsv[:, :, 1] * gain + offset, 0.0, 1.0)
    return _finish(_rgb(hsv), image)


def pixelate(image: np.ndarray, block: int) -> np.ndarray:
    """Replace each block x block tile by its mean; edge tiles may be smaller."""
    if block <= 1:
        return image.copy()
    h, w = image.shape[:2]
    rows, cols = np.arange(0, h, block), np.arange(0, w, block)
    x = np.asarray(image, dtype=np.float64)
    sums = np.add.reduceat(np.add.reduceat(x, rows, axis=0), cols, axis=1)
    row_counts = np.diff(np.append(rows, h))
    col_counts = np.diff(np.append(cols, w))
    means = sums / (row_counts[:, None] * col_counts[None, :]).reshape(len(rows), len(cols), *([1] * (x.ndim - 2)))
    out = np.repeat(np.repeat(means, row_counts, axis=0), col_counts, axis=1)
    return _finish(out, image)


def corrupt_with_magnitude(image: np.ndarray, kind: str, magnitude, rng: np.random.Generator) -> np.ndarray:
    """Apply `kind` with an explicit magnitude (a table entry or any other value such as 0)."""
    if kind == "gaussian_noise":
        return gaussian_noise(image, magnitude, rng)
    if kind == "shot_noise":
        return shot_noise(image, magnitude, rng)
    if kind == "impulse_noise":
        return impulse_noise(image, magnitude, rng)
    if kind == "gaussian_blur":
        return gaussian_blur(image, magnitude)
    if kind == "defocus_blur":
        radius, alias = magnitude if isinstance(magnitude, tuple) else (magnitude, 0.1)
        return defocus_blur(image, radius, alias)
    if kind == "contrast":
        return contrast(image, magnitude)
    if kind == "brightness":
        return brightness(image, magnitude)
    if kind == "saturate":
        gain, offset = magnitude if isinstance(magnitude, tuple) else (magnitude, 0.0)
        return saturate(image, gain, offset)
    if kind == "pixelate":
        return pixelate(image, magnitude)
    raise UnknownCorruptionError(f"Unknown corruption kind '{kind}'. Available: {', '.join(KINDS)}")


def apply_corruption(image: np.ndarray, spec: CorruptionSpec, rng: np.random.Generator) -> np.ndarray:
    """Same shape, values clipped to [0, 1]; deterministic for a given rng state."""
    if image.ndim != 3:
        raise ValueError(f"expected an H x W x C image, got shape {image.shape}")
    return corrupt_with_magnitude(image, spec.kind, spec.magnitude, rng)


def corruption_rng(seed: int, source: str, kind: str, severity: int) -> np.random.Generator:
    key = zlib.crc32(f"{source}|{kind}|{severity}".encode("utf-8"))
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, key])


def parse_kinds(text: str) -> List[str]:
    if text.strip().lower() == "all":
        return list(KINDS)
    kinds = [k.strip() for k in text.split(",") if k.strip()]
    for kind in kinds:
        if kind not in SEVERITY_TABLES:
            raise UnknownCorruptionError(f"Unknown corruption kind '{kind}'. Available: {', '.join(KINDS)}")
    return kinds


def parse_severities(text: str) -> List[int]:
    """'3', '1,3,5' or a range '1-5'."""
    values: List[int] = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            low, high = (int(v) for v in part.split("-", 1))
            values.extend(range(low, high + 1))
        elif part:
            values.append(int(part))
    bad = [v for v in values if v not in SEVERITIES]
    if bad or not values:
        raise ValueError(f"severities must be within {SEVERITIES}, got '{text}'")
    return sorted(set(values))


# =============================================================================
# Grid builder
# =============================================================================

def _corrupt_one_image(path: Path, source: str, kinds: Sequence[str], severities: Sequence[int],
                       seed: int, out_dir: Path, image_size: int) -> List[dict]:
    """All cells of one source, or none: a failure removes the files already written."""
    clean = standardize_image(load_image(path), image_size)
    rows = []
    written: List[Path] = []
    try:
        for kind in kinds:
            for severity in severities:
                corrupted = apply_corruption(clean, CorruptionSpec(kind, severity),
                                             corruption_rng(seed, source, kind, severity))
                rel = Path(kind) / str(severity) / Path(source).with_suffix(".png")
                target = out_dir / rel
                target.parent.mkdir(parents=True, exist_ok=True)
                written.append(target)
                save_image(corrupted, target)
                rows.append({"path": rel.as_posix(), "kind": kind, "severity": severity, "source": source})
    except Exception:
        for target in written:
            target.unlink(missing_ok=True)
        logging.warning(f"Removed {len(written)} partial outputs of {source}")
        raise
    return rows


def build_corrupted_set(clean_dir: Union[str, Path], kinds: Iterable[str], severities: Iterable[int],
                        seed: int, out_dir: Union[str, Path], image_size: int = 256,
                        max_workers: int = 4) -> pd.DataFrame:
    """One corrupted copy per (image, kind, severity) plus manifest.csv; failures are per file."""
    clean_dir, out_dir = Path(clean_dir), Path(out_dir)
    kinds = [CorruptionSpec(k, 1).kind for k in kinds]
    severities = sorted({CorruptionSpec(KINDS[0], int(s)).severity for s in severities})
    if not kinds or not severities:
        raise ValueError("build_corrupted_set needs at least one kind and one severity")
    sources = list_images(clean_dir)
    if not sources:
        raise FileNotFoundError(f"No PNG/PPM images found in {clean_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)
    logging.info(f"Corrupting {len(sources)} images x {len(kinds)} kinds x {len(severities)} severities")

    start_time = time.time()
    rows: List[dict] = []
    failures: Dict[str, str] = {}
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        future_to_source = {
            executor.submit(_corrupt_one_image, path, path.relative_to(clean_dir).as_posix(), kinds,
                            severities, seed, out_dir, image_size): path.relative_to(clean_dir).as_posix()
            for path in sources
        }
        for future in as_completed(future_to_source):
            source = future_to_source[future]
            try:
                rows.extend(future.result())
            except (ImageFormatError, OSError) as e:
                logging.error(f"Error corrupting {source}: {e}")
                failures[source] = str(e)

    manifest = pd.DataFrame(rows, columns=MANIFEST_COLUMNS)
    manifest = manifest.sort_values(["kind", "severity", "source"], kind="mergesort").reset_index(drop=True)
    manifest.to_csv(out_dir / "manifest.csv", index=False)

    summary = {
        "clean_dir": str(clean_dir),
        "output_dir": str(out_dir),
        "kinds": kinds,
        "severities": severities,
        "seed": seed,
        "source_images": len(sources),
        "failed_images": len(failures),
        "failures": failures,
        "outputs": len(manifest),
        "processing_time": time.time() - start_time,
        "timestamp": datetime.now().isoformat(),
    }
    with open(out_dir / "corrupt_summary.json", "w") as f:
        json.dump(summary, f, indent=2)

    logging.info("=" * 60)
    logging.info("CORRUPTION GRID COMPLETED")
    logging.info("=" * 60)
    logging.info(f"Source images: {summary['source_images']}")
    logging.info(f"Failed: {summary['failed_images']}")
    logging.info(f"Outputs written: {summary['outputs']}")
    logging.info(f"Total processing time: {summary['processing_time']:.2f} seconds")
    logging.info(f"Results saved to: {out_dir}")
    logging.info("=" * 60)
    return manifest


def read_manifest(path: Union[str, Path]) -> pd.DataFrame:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.csv"
    manifest = pd.read_csv(path)
    missing = [c for c in MANIFEST_COLUMNS if c not in manifest.columns]
    if missing:
        raise ValueError(f"{path} is not a corruption manifest (missing {missing})")
    return manifest
