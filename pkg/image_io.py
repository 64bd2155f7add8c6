#!/usr/bin/env python3
"""
Image Codecs
8-bit PNG and binary PPM (P6) through Pillow. Arrays are H x W x 3; float
arrays live in [0, 1], uint8 arrays are raw bytes.
"""

import logging
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from patching import standardize_image

SUPPORTED_FORMATS = {"PNG": ".png", "PPM": ".ppm"}
IMAGE_SUFFIXES = (".png", ".ppm")
_EIGHT_BIT_MODES = ("1", "L", "LA", "P", "RGB", "RGBA")


class ImageFormatError(ValueError):
    pass


def load_image_uint8(path: Union[str, Path]) -> np.ndarray:
    """H x W x 3 uint8; grayscale is replicated to three channels, alpha is dropped."""
    try:
        with Image.open(path) as img:
            if img.format not in SUPPORTED_FORMATS:
                raise ImageFormatError(f"{Path(path).name}: unsupported format {img.format}")
            if img.mode not in _EIGHT_BIT_MODES:
                raise ImageFormatError(f"{Path(path).name}: unsupported pixel mode {img.mode}")
            img.load()
            return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()
    except ImageFormatError:
        raise
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as e:
        raise ImageFormatError(f"{Path(path).name}: cannot decode ({e})") from None


def load_image(path: Union[str, Path]) -> np.ndarray:
    return load_image_uint8(path).astype(np.float32) / 255.0


def to_uint8(image: np.ndarray) -> np.ndarray:
    if image.dtype == np.uint8:
        return image
    return np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_image(image: np.ndarray, path: Union[str, Path]) -> None:
    path = Path(path)
    fmt = {v: k for k, v in SUPPORTED_FORMATS.items()}.get(path.suffix.lower())
    if fmt is None:
        raise ImageFormatError(f"{path.name}: unsupported output extension {path.suffix}")
    pixels = to_uint8(image)
    if pixels.ndim == 3 and pixels.shape[2] == 1:
        pixels = pixels[:, :, 0]
    if pixels.ndim not in (2, 3) or (pixels.ndim == 3 and pixels.shape[2] != 3):
        raise ImageFormatError(f"{path.name}: expected H x W x 3 or H x W, got {pixels.shape}")
    Image.fromarray(pixels).convert("RGB").save(path, format=fmt)


def list_images(directory: Union[str, Path]) -> List[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"Image directory does not exist: {directory}")
    return sorted(p for p in directory.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())


def load_directory(directory: Union[str, Path], size: int) -> Tuple[List[str], List[np.ndarray], List[str]]:
    """Standardized uint8 images of a directory; unreadable files are logged and skipped."""
    names, images, skipped = [], [], []
    root = Path(directory)
    for path in list_images(root):
        name = path.relative_to(root).as_posix()
        try:
            images.append(standardize_image(load_image_uint8(path), size))
            names.append(name)
        except ImageFormatError as e:
            logging.warning(f"Skipping {name}: {e}")
            skipped.append(name)
    logging.info(f"Loaded {len(images)} images from {root} ({len(skipped)} skipped)")
    return names, images, skipped
