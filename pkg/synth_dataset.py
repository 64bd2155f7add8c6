#!/usr/bin/env python3
"""
Synthetic In-Distribution Images
A fixed procedural family: a power-law (1/f amplitude) Gaussian random field
blended between two random colors, overlaid with random colored shapes.
Image i of a dataset depends only on (seed, i).
"""

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from datetime import datetime
from pathlib import Path
from typing import Union

import cv2
import numpy as np
import pandas as pd

from image_io import save_image

SPECTRAL_EXPONENT = 1.0
SHAPES_PER_IMAGE = (3, 8)


def power_law_field(rng: np.random.Generator, size: int, exponent: float = SPECTRAL_EXPONENT) -> np.ndarray:
    """Zero-mean, unit-variance field with amplitude spectrum ~ f^-exponent."""
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.rfftfreq(size)[None, :]
    freq = np.sqrt(fx ** 2 + fy ** 2)
    freq[0, 0] = np.inf
    spectrum = (rng.standard_normal(freq.shape) + 1j * rng.standard_normal(freq.shape)) * freq ** -exponent
    field = np.fft.irfft2(spectrum, s=(size, size))
    field -= field.mean()
    return field / (field.std() + 1e-12)


def _random_color(rng: np.random.Generator) -> tuple:
    return tuple(int(c) for c in rng.integers(0, 256, size=3))


def _draw_shape(canvas: np.ndarray, rng: np.random.Generator) -> None:
    size = canvas.shape[0]
    color = _random_color(rng)
    kind = rng.integers(0, 4)
    if kind == 0:
        center = tuple(int(v) for v in rng.integers(0, size, size=2))
        cv2.circle(canvas, center, int(rng.integers(size // 32 + 1, size // 6 + 2)), color, -1, cv2.LINE_AA)
    elif kind == 1:
        p1 = rng.integers(0, size, size=2)
        p2 = p1 + rng.integers(size // 16 + 1, size // 4 + 2, size=2)
        cv2.rectangle(canvas, tuple(int(v) for v in p1), tuple(int(v) for v in p2), color, -1, cv2.LINE_AA)
    elif kind == 2:
        points = rng.integers(0, size, size=(3, 2)).astype(np.int32)
        cv2.fillPoly(canvas, [points], color, cv2.LINE_AA)
    else:
        p1, p2 = rng.integers(0, size, size=(2, 2))
        thickness = int(rng.integers(1, max(2, size // 32)))
        cv2.line(canvas, tuple(int(v) for v in p1), tuple(int(v) for v in p2), color, thickness, cv2.LINE_AA)


def synth_image(rng: np.random.Generator, size: int = 256) -> np.ndarray:
    """One H x W x 3 uint8 image of the family."""
    field = power_law_field(rng, size)
    blend = 1.0 / (1.0 + np.exp(-1.5 * field))
    low, high = (np.array(_random_color(rng), dtype=np.float64) for _ in range(2))
    base = low + blend[:, :, None] * (high - low)
    base += 12.0 * np.stack([power_law_field(rng, size, 1.5) for _ in range(3)], axis=-1)
    canvas = np.ascontiguousarray(np.clip(np.round(base), 0, 255).astype(np.uint8))
    for _ in range(int(rng.integers(SHAPES_PER_IMAGE[0], SHAPES_PER_IMAGE[1] + 1))):
        _draw_shape(canvas, rng)
    return canvas


def image_stream(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, index])


def synth_dataset(out_dir: Union[str, Path], n: int, seed: int = 0, size: int = 256,
                  max_workers: int = 4) -> pd.DataFrame:
    """Write synth_00000.png ... plus manifest.csv (path,index) and synth_summary.json."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    start_time = time.time()
    logging.info(f"Generating {n} synthetic {size}x{size} images (seed {seed}) in {out_dir}")

    def write_one(index: int) -> str:
        name = f"synth_{index:05d}.png"
        save_image(synth_image(image_stream(seed, index), size), out_dir / name)
        return name

    names = {}
    failures = {}
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        future_to_index = {executor.submit(write_one, i): i for i in range(n)}
        for future in as_completed(future_to_index):
            index = future_to_index[future]
            try:
                names[index] = future.result()
            except OSError as e:
                logging.error(f"Error writing synthetic image {index}: {e}")
                failures[index] = str(e)

    manifest = pd.DataFrame([{"path": names[i], "index": i} for i in sorted(names)], columns=["path", "index"])
    manifest.to_csv(out_dir / "manifest.csv", index=False)
    summary = {
        "output_dir": str(out_dir),
        "requested": n,
        "written": len(names),
        "failed": len(failures),
        "seed": seed,
        "size": size,
        "processing_time": time.time() - start_time,
        "timestamp": datetime.now().isoformat(),
    }
    with open(out_dir / "synth_summary.json", "w") as f:
        json.dump(summary, f, indent=2)
    logging.info(f"Wrote {len(names)} images ({len(failures)} failed) in {summary['processing_time']:.2f}s")
    return manifest
