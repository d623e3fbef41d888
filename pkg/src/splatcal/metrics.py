"""Evaluation: trajectory alignment and error metrics, intrinsics angular
error, image quality scores, and photometric test-view pose estimation.

Trajectories are compared in the camera-to-world convention. ATE is computed
after a closed-form least-squares similarity alignment; RPE compares
consecutive relative motions and is invariant to any global rigid transform,
so it needs no alignment.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateGeometry, NumericsError
from .geometry import CameraIntrinsics, CameraPose, RenderSettings, fov_of
from .losses import LossWeights, photometric_loss_and_grad
from .optim import Adam
from .rasterizer import render, render_backward
from .scene import SceneModel
from .ssim import ssim

log = logging.getLogger(__name__)

__all__ = [
    "Trajectory",
    "Similarity",
    "umeyama_align",
    "ate",
    "rpe",
    "fov_error",
    "psnr",
    "ssim",
    "estimate_test_pose",
    "PoseFit",
]


# ---------------------------------------------------------------------------
# trajectories and alignment
# ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    """Ordered (frame id, camera-to-world pose) pairs."""

    frame_ids: list
    poses: list  # [CameraPose], camera-to-world

    def __post_init__(self):
        ids = list(self.frame_ids)
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise ValueError("frame ids must be strictly increasing")

    @classmethod
    def from_world_to_camera(cls, frame_ids, poses_cw) -> "Trajectory":
        return cls(list(frame_ids), [p.inverse() for p in poses_cw])

    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses])

    def __len__(self) -> int:
        return len(self.poses)


@dataclass
class Similarity:
    """x -> scale * rotation @ x + translation."""

    scale: float = 1.0
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(pts) @ self.rotation.T + self.translation


def umeyama_align(est: Trajectory, gt: Trajectory) -> Similarity:
    """Closed-form least-squares similarity: minimizes
    sum || gt_i - (s R est_i + t) ||^2 with a reflection guard (det R = +1).
    """
    x = est.positions()
    y = gt.positions()
    if x.shape != y.shape:
        raise ValueError("trajectories differ in length")
    n = x.shape[0]
    if n < 3:
        raise DegenerateGeometry("need at least 3 position pairs")
    mx, my = x.mean(axis=0), y.mean(axis=0)
    xc, yc = x - mx, y - my
    cov = yc.T @ xc / n
    u, d, vt = np.linalg.svd(cov)
    if d[1] < 1e-12 * max(d[0], 1e-300):
        raise DegenerateGeometry("positions are collinear or coincident")
    s_mat = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s_mat[2, 2] = -1.0
    r = u @ s_mat @ vt
    var_x = float(np.mean(np.sum(xc * xc, axis=1)))
    if var_x < 1e-24:
        raise DegenerateGeometry("estimated positions are coincident")
    scale = float(np.trace(np.diag(d) @ s_mat)) / var_x
    t = my - scale * r @ mx
    return Similarity(scale=scale, rotation=r, translation=t)


def ate(est: Trajectory, gt: Trajectory, alignment: Similarity) -> float:
    """RMSE of per-frame position error after applying ``alignment`` to est."""
    if list(est.frame_ids) != list(gt.frame_ids):
        raise ValueError("frame ids do not match")
    res = gt.positions() - alignment.apply(est.positions())
    return float(np.sqrt(np.mean(np.sum(res * res, axis=1))))


def rpe(est: Trajectory, gt: Trajectory) -> tuple[float, float]:
    """Relative pose error over consecutive frames.

    Returns (rpe_t, rpe_r): RMSE of the relative-motion translation error
    scaled by 100, and RMSE of the relative-motion rotation error in degrees.
    """
    if list(est.frame_ids) != list(gt.frame_ids):
        raise ValueError("frame ids do not match")
    if len(est) < 2:
        raise ValueError("need at least 2 frames")
    t_err, r_err = [], []
    for i in range(len(est) - 1):
        rel_est = est.poses[i].inverse().compose(est.poses[i + 1])
        rel_gt = gt.poses[i].inverse().compose(gt.poses[i + 1])
        delta = rel_gt.inverse().compose(rel_est)
        t_err.append(np.linalg.norm(delta.translation) ** 2)
        r_err.append(np.linalg.norm(delta.rotation) ** 2)  # |axis-angle| = angle
    rpe_t = 100.0 * math.sqrt(float(np.mean(t_err)))
    rpe_r = math.degrees(math.sqrt(float(np.mean(r_err))))
    return rpe_t, rpe_r


def fov_error(k_est: CameraIntrinsics, k_gt: CameraIntrinsics) -> float:
    """Absolute difference of the diagonal fields of view, in degrees."""
    if (k_est.width, k_est.height) != (k_gt.width, k_gt.height):
        raise ValueError("intrinsics are for different image sizes")
    return abs(fov_of(k_est) - fov_of(k_gt))


# ---------------------------------------------------------------------------
# image quality
# ---------------------------------------------------------------------------


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]; +inf when equal."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


# ---------------------------------------------------------------------------
# test-view pose estimation
# ---------------------------------------------------------------------------


@dataclass
class PoseFit:
    pose: CameraPose
    initial_loss: float
    final_loss: float
    diverged: bool = False


def estimate_test_pose(
    scene: SceneModel,
    k: CameraIntrinsics,
    test_image: np.ndarray,
    init_pose: CameraPose,
    steps: int = 500,
    weights: LossWeights | None = None,
    settings: RenderSettings | None = None,
    lr_rotation: float = 5e-3,
    lr_translation: float = 1e-2,
    return_info: bool = False,
):
    """Estimate the pose of a held-out view against a frozen scene and K.

    Runs pose-only first-order optimization of the photometric objective for
    a fixed step budget and returns the best pose seen. On numeric failure
    the initial pose is returned with a warning.
    """
    weights = weights or LossWeights.joint()
    settings = settings or RenderSettings()
    pose = init_pose.copy()
    params = {"rot": pose.rotation, "trans": pose.translation}
    opt = Adam({"rot": lr_rotation, "trans": lr_translation})

    def photometric(p: CameraPose):
        out = render(scene, p, k, settings)
        l1, dval, dimg = photometric_loss_and_grad(out.image, test_image, weights)
        return weights.lambda1 * l1 + weights.lambda_dssim * dval, out, dimg

    try:
        best_loss, _, _ = photometric(pose)
        initial_loss = best_loss
        best_pose = pose.copy()
        for _ in range(steps):
            loss, out, dimg = photometric(pose)
            if loss < best_loss:
                best_loss, best_pose = loss, pose.copy()
            bundle = render_backward(out, dimg, scene, pose, k)
            opt.step(params, {"rot": bundle.d_rotation, "trans": bundle.d_translation})
            pose.rotation[:] = np.asarray(
                CameraPose(pose.rotation, pose.translation).canonicalized().rotation
            )
        loss, _, _ = photometric(pose)
        if loss < best_loss:
            best_loss, best_pose = loss, pose.copy()
        fit = PoseFit(best_pose, initial_loss, best_loss, diverged=False)
    except NumericsError as exc:
        log.warning("test-pose estimation diverged (%s); returning the initial pose", exc)
        fit = PoseFit(init_pose.copy(), math.inf, math.inf, diverged=True)
    return (fit.pose, fit) if return_info else fit.pose
