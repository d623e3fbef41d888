"""Small raster helpers shared by sampling-heavy modules.

Continuous image coordinates put pixel (ix, iy)'s center at (ix + 0.5, iy + 0.5),
so the principal point (w/2, h/2) is the exact image center.
"""

from __future__ import annotations

import numpy as np


def bilinear_sample(img: np.ndarray, xy: np.ndarray) -> np.ndarray:
    """Bilinearly interpolate ``img`` (H, W) or (H, W, C) at continuous
    coordinates ``xy`` (N, 2); samples are clamped to the image border."""
    img = np.asarray(img)
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    h, w = img.shape[:2]
    u = np.clip(xy[:, 0] - 0.5, 0.0, w - 1.0)
    v = np.clip(xy[:, 1] - 0.5, 0.0, h - 1.0)
    x0 = np.clip(np.floor(u).astype(np.int64), 0, w - 1)
    y0 = np.clip(np.floor(v).astype(np.int64), 0, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (u - x0).reshape(-1, *([1] * (img.ndim - 2)))
    fy = (v - y0).reshape(-1, *([1] * (img.ndim - 2)))
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Quantize a float image in [0, 1] to 8 bits."""
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def from_uint8(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) / 255.0
