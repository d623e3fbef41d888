"""Scalar training objectives: photometric (L1, D-SSIM), multi-view track
reprojection, tracked-Gaussian scale regularization, and their weighted sum.

Every loss comes with an exact analytic gradient helper so the trainer can
assemble upstream gradients without autodiff. The track loss is normalized
by its residual count by default (keeping its weight scale-free across scene
sizes); the scale loss defaults to the raw sum, whose per-Gaussian gradient
is what actually overpowers the photometric pull on tracked-Gaussian sizes.
Both accept a ``normalize`` override.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericsError
from .scene import SceneModel
from .ssim import ssim_and_grad
from .tracks import TrackSet

__all__ = [
    "LossWeights",
    "l1_loss",
    "l1_grad",
    "dssim_loss",
    "dssim_loss_and_grad",
    "photometric_loss_and_grad",
    "track_loss",
    "track_loss_and_grads",
    "scale_loss",
    "scale_loss_and_grad",
    "total_loss",
]


@dataclass
class LossWeights:
    """Weights of the combined objective; ``phase`` documents which regime
    the defaults correspond to."""

    lambda1: float = 0.8
    lambda_dssim: float = 0.2
    lambda_track: float = 0.01
    lambda_scale: float = 0.01
    phase: str = "joint"

    def __post_init__(self):
        for name in ("lambda1", "lambda_dssim", "lambda_track", "lambda_scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @classmethod
    def warmup(cls, lambda_track: float = 1.0) -> "LossWeights":
        """Warmup regime: photometric and track terms at 1.0, no scale loss."""
        return cls(lambda1=1.0, lambda_dssim=1.0, lambda_track=lambda_track,
                   lambda_scale=0.0, phase="warmup")

    @classmethod
    def joint(cls, lambda_track: float = 0.01, lambda_scale: float = 0.01) -> "LossWeights":
        return cls(lambda1=0.8, lambda_dssim=0.2, lambda_track=lambda_track,
                   lambda_scale=lambda_scale, phase="joint")


# ---------------------------------------------------------------------------
# photometric
# ---------------------------------------------------------------------------


def _check_images(rendered, target):
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValueError(f"image shapes differ: {rendered.shape} vs {target.shape}")
    return rendered, target


def l1_loss(rendered: np.ndarray, target: np.ndarray) -> float:
    """Mean absolute difference over all pixels and channels."""
    rendered, target = _check_images(rendered, target)
    return float(np.mean(np.abs(rendered - target)))


def l1_grad(rendered: np.ndarray, target: np.ndarray) -> np.ndarray:
    rendered, target = _check_images(rendered, target)
    return np.sign(rendered - target) / rendered.size


def dssim_loss(rendered: np.ndarray, target: np.ndarray, win_size: int = 11) -> float:
    """Structural dissimilarity (1 - SSIM) / 2; zero for identical images."""
    value, _ = ssim_and_grad(rendered, target, win_size=win_size)
    return (1.0 - value) / 2.0


def dssim_loss_and_grad(rendered, target, win_size: int = 11) -> tuple[float, np.ndarray]:
    value, grad = ssim_and_grad(rendered, target, win_size=win_size)
    return (1.0 - value) / 2.0, -0.5 * grad


def photometric_loss_and_grad(
    rendered: np.ndarray, target: np.ndarray, w: LossWeights, win_size: int = 11
) -> tuple[float, float, np.ndarray]:
    """(L1 value, D-SSIM value, gradient of the weighted photometric sum with
    respect to the rendered image)."""
    l1 = l1_loss(rendered, target)
    grad = w.lambda1 * l1_grad(rendered, target)
    if w.lambda_dssim > 0:
        dval, dgrad = dssim_loss_and_grad(rendered, target, win_size=win_size)
        grad += w.lambda_dssim * dgrad
    else:
        dval = 0.0
    return l1, dval, grad


# ---------------------------------------------------------------------------
# track loss
# ---------------------------------------------------------------------------


def _track_terms(ts: TrackSet, projections: dict):
    """Yield (view, track id, residual vector) for every unclipped observation."""
    for tr in ts.tracks:
        for obs in tr.observations:
            view_proj = projections.get(obs.image_id)
            if view_proj is None or tr.track_id not in view_proj:
                continue  # clipped in this view
            yield obs.image_id, tr.track_id, obs.pixel - view_proj[tr.track_id]


def track_loss(ts: TrackSet, projections: dict, normalize: bool = True) -> float:
    """Sum of Euclidean reprojection errors (pixels) of all track
    observations against the projected track Gaussians.

    ``projections`` maps view id -> {track id -> projected pixel}; clipped
    observations are skipped. Normalized by the number of summed residuals
    unless ``normalize`` is False.
    """
    total, count = 0.0, 0
    for _, _, r in _track_terms(ts, projections):
        total += float(np.linalg.norm(r))
        count += 1
    if normalize and count:
        return total / count
    return total


def track_loss_and_grads(
    ts: TrackSet, projections: dict, normalize: bool = True
) -> tuple[float, dict, int]:
    """Track loss plus per-view upstream gradients for the projected pixels.

    Returns (loss, {view id: {track id: dL/dprojection (2,)}}, residual count).
    """
    terms = list(_track_terms(ts, projections))
    count = len(terms)
    scale = 1.0 / count if (normalize and count) else 1.0
    total = 0.0
    grads: dict[int, dict[int, np.ndarray]] = {}
    for view, tid, r in terms:
        n = float(np.linalg.norm(r))
        total += n
        # d||p - phat||/dphat = -(p - phat)/||...||; zero residual has no pull
        g = -r / n * scale if n > 1e-12 else np.zeros(2)
        grads.setdefault(view, {})
        if tid in grads[view]:
            grads[view][tid] = grads[view][tid] + g
        else:
            grads[view][tid] = g
    return total * scale, grads, count


# ---------------------------------------------------------------------------
# scale loss
# ---------------------------------------------------------------------------


def scale_loss(scene: SceneModel, normalize: bool = False) -> float:
    """Sum over tracked Gaussians of the largest materialized scale component."""
    if not np.any(scene.tracked):
        return 0.0
    s = np.exp(scene.log_scales[scene.tracked])
    total = float(s.max(axis=1).sum())
    return total / s.shape[0] if normalize else total


def scale_loss_and_grad(scene: SceneModel, normalize: bool = False) -> tuple[float, np.ndarray]:
    """Scale loss and its gradient with respect to the log-scales (N, 3)."""
    grad = np.zeros_like(scene.log_scales)
    if not np.any(scene.tracked):
        return 0.0, grad
    rows = np.nonzero(scene.tracked)[0]
    s = np.exp(scene.log_scales[rows])
    arg = np.argmax(s, axis=1)
    smax = s[np.arange(rows.size), arg]
    scale = 1.0 / rows.size if normalize else 1.0
    # d exp(ls)/d ls = s on the max component only
    grad[rows, arg] = smax * scale
    return float(smax.sum()) * scale, grad


# ---------------------------------------------------------------------------
# combined
# ---------------------------------------------------------------------------


def total_loss(l1: float, dssim: float, track: float, scale: float, w: LossWeights) -> float:
    terms = {"l1": l1, "dssim": dssim, "track": track, "scale": scale}
    for name, value in terms.items():
        if not math.isfinite(value):
            raise NumericsError(f"loss term '{name}' is not finite: {value}")
    return (
        w.lambda1 * l1
        + w.lambda_dssim * dssim
        + w.lambda_track * track
        + w.lambda_scale * scale
    )
