"""Input-preprocessing defenses applied to images before encoding.

All filters use 3x3 windows with edge replication. ``jpeg_like`` is a
blockwise 8x8 DCT round trip through the standard quality-50 luminance
quantization table, applied to each channel independently on a 0..255 scale.
"""

from __future__ import annotations

import numpy as np
from scipy import fft, ndimage

from cpgc.errors import ContractError, ShapeError

DEFENSES = ("gaussian_smooth", "median_smooth", "average_smooth", "jpeg_like")

GAUSSIAN_SIGMA = 1.0

JPEG_Q50 = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


def _spatial(x: np.ndarray, n: int) -> tuple[int, ...]:
    """Window size ``n`` on the two spatial axes of a (..., H, W, C) array, 1 elsewhere."""
    return (1,) * (x.ndim - 3) + (n, n, 1)


def jpeg_like(images: np.ndarray) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    *lead, h, w, c = x.shape
    if h % 8 or w % 8:
        raise ShapeError(f"jpeg_like needs sides divisible by 8, got {h}x{w}")
    # (..., H/8, 8, W/8, 8, C) -> (..., H/8, W/8, C, 8, 8) blocks on a centred 0..255 scale
    blocks = (x * 255.0 - 128.0).reshape(*lead, h // 8, 8, w // 8, 8, c)
    blocks = np.moveaxis(blocks, (-4, -2), (-2, -1))
    coef = fft.dctn(blocks, axes=(-2, -1), norm="ortho")
    coef = np.round(coef / JPEG_Q50) * JPEG_Q50
    rec = fft.idctn(coef, axes=(-2, -1), norm="ortho")
    rec = np.moveaxis(rec, (-2, -1), (-4, -2)).reshape(x.shape)
    return np.clip((rec + 128.0) / 255.0, 0.0, 1.0)


def apply_defense(images: np.ndarray, defense: str | None) -> np.ndarray:
    """Apply ``defense`` to one (32,32,3) image or a batch (n,32,32,3); ``None`` is the identity."""
    x = np.asarray(images, dtype=np.float64)
    if x.ndim < 3 or x.shape[-1] != 3:
        raise ShapeError(f"expected (..., H, W, 3) images, got {x.shape}")
    if defense is None or defense == "none":
        return x
    if defense == "gaussian_smooth":
        sigma = (0.0,) * (x.ndim - 3) + (GAUSSIAN_SIGMA, GAUSSIAN_SIGMA, 0.0)
        # truncate=1 sigma gives a radius-1 (3x3) kernel
        out = ndimage.gaussian_filter(x, sigma, mode="nearest", truncate=1.0)
    elif defense == "average_smooth":
        out = ndimage.uniform_filter(x, _spatial(x, 3), mode="nearest")
    elif defense == "median_smooth":
        out = ndimage.median_filter(x, _spatial(x, 3), mode="nearest")
    elif defense == "jpeg_like":
        return jpeg_like(x)
    else:
        raise ContractError(f"unknown defense {defense!r}; expected one of {DEFENSES}")
    return np.clip(out, 0.0, 1.0)
