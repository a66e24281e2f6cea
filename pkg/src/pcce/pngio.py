"""Thin PNG helpers on top of Pillow.

All maps move through these functions so dtype conventions stay in one
place: RGB is uint8 H×W×3, grayscale uint8 H×W, depth uint16 H×W, and
binary masks are bool H×W serialized as {0, 255}.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

from .errors import FormatError


def read_rgb(path) -> np.ndarray:
    img = np.asarray(Image.open(path).convert("RGB"))
    return img.astype(np.uint8)


def write_rgb(arr: np.ndarray, path) -> None:
    arr = np.asarray(arr)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise FormatError(f"expected uint8 H×W×3 array, got {arr.dtype} {arr.shape}")
    Image.fromarray(arr, mode="RGB").save(path)


def read_gray(path) -> np.ndarray:
    img = Image.open(path)
    if img.mode not in ("L", "1"):
        img = img.convert("L")
    return np.asarray(img).astype(np.uint8)


def write_gray(arr: np.ndarray, path) -> None:
    arr = np.asarray(arr)
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise FormatError(f"expected uint8 H×W array, got {arr.dtype} {arr.shape}")
    Image.fromarray(arr, mode="L").save(path)


def read_mask(path) -> np.ndarray:
    """Binary mask: any nonzero pixel counts as occupied."""
    return read_gray(path) > 0


def write_mask(mask: np.ndarray, path) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise FormatError(f"expected H×W mask, got shape {mask.shape}")
    write_gray(np.where(mask.astype(bool), 255, 0).astype(np.uint8), path)


def read_depth16(path) -> np.ndarray:
    img = Image.open(path)
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        return arr.astype(np.uint16)
    return arr.astype(np.uint16)


def write_depth16(arr: np.ndarray, path) -> None:
    arr = np.asarray(arr)
    if arr.ndim != 2 or arr.dtype != np.uint16:
        raise FormatError(f"expected uint16 H×W array, got {arr.dtype} {arr.shape}")
    Image.fromarray(arr, mode="I;16").save(path)
