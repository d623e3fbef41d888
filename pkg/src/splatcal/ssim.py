"""Structural similarity with a Gaussian window and its analytic input gradient.

Local statistics use an 11x11 Gaussian window (sigma = 1.5) in "valid" mode
(the score map shrinks by the window size), matching the reference
formulation of SSIM. The gradient with respect to the first image is exact:
statistic-level gradients are scattered back through the window adjoint,
which for a symmetric separable window is a pair of 1D convolutions.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import convolve1d

__all__ = ["ssim", "ssim_and_grad", "gaussian_window_1d"]

DEFAULT_WIN = 11
DEFAULT_SIGMA = 1.5
C1 = (0.01 * 1.0) ** 2
C2 = (0.03 * 1.0) ** 2


def gaussian_window_1d(win_size: int = DEFAULT_WIN, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    half = (win_size - 1) / 2.0
    x = np.arange(win_size) - half
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def _corr_valid(img: np.ndarray, w1: np.ndarray) -> np.ndarray:
    half = (w1.size - 1) // 2
    out = convolve1d(img, w1, axis=0, mode="constant")
    out = convolve1d(out, w1, axis=1, mode="constant")
    return out[half:-half, half:-half]


def _scatter_full(grad_map: np.ndarray, w1: np.ndarray, shape: tuple) -> np.ndarray:
    half = (w1.size - 1) // 2
    pad = np.zeros(shape)
    pad[half:-half, half:-half] = grad_map
    out = convolve1d(pad, w1, axis=0, mode="constant")
    return convolve1d(out, w1, axis=1, mode="constant")


def _check(a: np.ndarray, b: np.ndarray, win_size: int) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape[0], a.shape[1]) < win_size:
        raise ValueError(
            f"image {a.shape[:2]} is smaller than the {win_size}x{win_size} window"
        )
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    return a, b


def _channel_stats(x, y, w1):
    mx = _corr_valid(x, w1)
    my = _corr_valid(y, w1)
    sxx = _corr_valid(x * x, w1) - mx * mx
    syy = _corr_valid(y * y, w1) - my * my
    sxy = _corr_valid(x * y, w1) - mx * my
    a1 = 2 * mx * my + C1
    a2 = 2 * sxy + C2
    b1 = mx * mx + my * my + C1
    b2 = sxx + syy + C2
    return mx, my, sxy, a1, a2, b1, b2


def ssim(a: np.ndarray, b: np.ndarray, win_size: int = DEFAULT_WIN,
         sigma: float = DEFAULT_SIGMA) -> float:
    """Mean structural similarity between two images in [0, 1] range
    ((H, W) or (H, W, C); channels are averaged)."""
    a, b = _check(a, b, win_size)
    w1 = gaussian_window_1d(win_size, sigma)
    total = 0.0
    for c in range(a.shape[2]):
        _, _, _, a1, a2, b1, b2 = _channel_stats(a[:, :, c], b[:, :, c], w1)
        total += float(np.mean(a1 * a2 / (b1 * b2)))
    return total / a.shape[2]


def ssim_and_grad(a: np.ndarray, b: np.ndarray, win_size: int = DEFAULT_WIN,
                  sigma: float = DEFAULT_SIGMA) -> tuple[float, np.ndarray]:
    """SSIM value plus its exact gradient with respect to ``a``."""
    squeeze = np.asarray(a).ndim == 2
    a, b = _check(a, b, win_size)
    w1 = gaussian_window_1d(win_size, sigma)
    grad = np.zeros_like(a)
    total = 0.0
    n_ch = a.shape[2]
    for c in range(n_ch):
        x, y = a[:, :, c], b[:, :, c]
        mx, my, sxy, a1, a2, b1, b2 = _channel_stats(x, y, w1)
        denom = b1 * b2
        s_map = a1 * a2 / denom
        total += float(np.mean(s_map))

        # per-window-statistic gradients, scaled by the mean normalization
        norm = 1.0 / (s_map.size * n_ch)
        g_mx = norm * (2 * my * a2 / denom - 2 * mx * a1 * a2 / (b1 * denom))
        g_sxx = norm * (-a1 * a2 / (b2 * denom))
        g_sxy = norm * (2 * a1 / denom)

        shape = x.shape
        grad_c = _scatter_full(g_mx, w1, shape)
        grad_c += 2 * x * _scatter_full(g_sxx, w1, shape)
        grad_c -= _scatter_full(2 * mx * g_sxx, w1, shape)
        grad_c += y * _scatter_full(g_sxy, w1, shape)
        grad_c -= _scatter_full(my * g_sxy, w1, shape)
        grad[:, :, c] = grad_c
    value = total / n_ch
    return value, (grad[:, :, 0] if squeeze else grad)
