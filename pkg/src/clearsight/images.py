"""8-bit PNG <-> float image plane conversion and resizing.

An image plane is an H x W x C float array with values in [0, 1].
Files are 8-bit PNGs; conversion is /255 on read and round(x*255) on write.
"""

from __future__ import annotations

import os

import cv2
import numpy as np

from .errors import DimensionError, ValidationError


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Read an 8-bit image file into an H x W x 3 float64 plane in [0, 1]."""
    raw = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if raw is None:
        raise ValidationError(f"cannot decode image: {path}")
    rgb = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB)
    return rgb.astype(np.float64) / 255.0


def save_image(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write a float image plane in [0, 1] as an 8-bit PNG."""
    check_image_plane(image)
    u8 = np.rint(np.asarray(image) * 255.0).astype(np.uint8)
    if u8.ndim == 3:
        u8 = cv2.cvtColor(u8, cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(str(path), u8):
        raise ValidationError(f"cannot write image: {path}")


def check_image_plane(image: np.ndarray, name: str = "image") -> np.ndarray:
    """Validate an H x W x C (or H x W) array with values in [0, 1]."""
    arr = np.asarray(image)
    if arr.ndim not in (2, 3):
        raise DimensionError(f"{name} must be H x W or H x W x C, got shape {arr.shape}")
    if arr.size == 0:
        raise DimensionError(f"{name} has a zero dimension: {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValidationError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValidationError(
            f"{name} values outside [0, 1]: min={arr.min():.4g} max={arr.max():.4g}"
        )
    return arr


def resize_image(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a float image plane to (height, width)."""
    arr = np.asarray(image)
    if arr.ndim not in (2, 3) or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValidationError(f"cannot resize image of shape {arr.shape}")
    if height <= 0 or width <= 0:
        raise ValidationError(f"target size must be positive, got {(height, width)}")
    if (arr.shape[0], arr.shape[1]) == (height, width):
        return arr.copy()
    out = cv2.resize(arr, (width, height), interpolation=cv2.INTER_LINEAR)
    return np.clip(out, 0.0, 1.0)
