"""The Gaussian scene model.

A :class:`SceneModel` stores all Gaussians as flat arrays (structure of
arrays): optimizers, the rasterizer, and densification all operate on these
arrays directly. Scales are kept in log-space and opacities as pre-sigmoid
logits so arbitrary gradient steps cannot violate positivity/range
constraints. Gaussians flagged ``tracked`` double as 3D track points: their
index is pinned in ``track_index`` and they are never deleted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericsError
from .images import bilinear_sample

__all__ = [
    "Gaussian",
    "SceneModel",
    "quat_normalize",
    "quat_to_rot",
    "quat_from_rot",
    "d_rot_d_quat",
    "build_covariance",
    "build_covariances",
    "eval_gaussian",
    "eval_sh",
    "color_of",
    "init_track_gaussians",
    "SH_C0",
]

# real spherical-harmonics constants, bands 0..3
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)


# ---------------------------------------------------------------------------
# quaternions  (convention: q = (w, x, y, z))
# ---------------------------------------------------------------------------


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    """Unit quaternion(s) -> rotation matrix/matrices; input is normalized first.
    Accepts (4,) or (N, 4), returns (3, 3) or (N, 3, 3)."""
    single = np.ndim(q) == 1
    q = quat_normalize(np.atleast_2d(q))
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    r = np.empty((q.shape[0], 3, 3))
    r[:, 0, 0] = 1 - 2 * (y * y + z * z)
    r[:, 0, 1] = 2 * (x * y - w * z)
    r[:, 0, 2] = 2 * (x * z + w * y)
    r[:, 1, 0] = 2 * (x * y + w * z)
    r[:, 1, 1] = 1 - 2 * (x * x + z * z)
    r[:, 1, 2] = 2 * (y * z - w * x)
    r[:, 2, 0] = 2 * (x * z - w * y)
    r[:, 2, 1] = 2 * (y * z + w * x)
    r[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return r[0] if single else r


def quat_from_rot(r: np.ndarray) -> np.ndarray:
    """Rotation matrix -> unit quaternion (w, x, y, z), w >= 0 (Shepperd's method)."""
    r = np.asarray(r, dtype=np.float64)
    tr = np.trace(r)
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s,
                      (r[1, 0] - r[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(r)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = math.sqrt(max(r[i, i] - r[j, j] - r[k, k] + 1.0, 0.0)) * 2
        q = np.empty(4)
        q[0] = (r[k, j] - r[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (r[j, i] + r[i, j]) / s
        q[1 + k] = (r[k, i] + r[i, k]) / s
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def d_rot_d_quat(q_raw: np.ndarray) -> np.ndarray:
    """Derivative of quat_to_rot with respect to the *raw* (unnormalized)
    quaternion, normalization included. Returns (N, 4, 3, 3)."""
    q_raw = np.atleast_2d(np.asarray(q_raw, dtype=np.float64))
    n = q_raw.shape[0]
    norm = np.linalg.norm(q_raw, axis=1, keepdims=True)
    q = q_raw / norm
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    zero = np.zeros(n)
    # dR/d(unit q); rows of R laid out explicitly
    dw = 2 * np.stack([zero, -z, y, z, zero, -x, -y, x, zero], axis=1)
    dx = 2 * np.stack([zero, y, z, y, -2 * x, -w, z, w, -2 * x], axis=1)
    dy = 2 * np.stack([-2 * y, x, w, x, zero, z, -w, z, -2 * y], axis=1)
    dz = 2 * np.stack([-2 * z, -w, x, w, -2 * z, y, x, y, zero], axis=1)
    d_unit = np.stack([dw, dx, dy, dz], axis=1).reshape(n, 4, 3, 3)
    # chain through normalization: d(unit)/d(raw) = (I - qq^T)/|q_raw|
    proj = (np.eye(4)[None] - q[:, :, None] * q[:, None, :]) / norm[:, :, None]
    return np.einsum("nab,nbij->naij", proj, d_unit)


# ---------------------------------------------------------------------------
# covariance and density
# ---------------------------------------------------------------------------


def build_covariance(q: np.ndarray, s: np.ndarray) -> np.ndarray:
    """World-space covariance Sigma = R S S^T R^T from a quaternion and a
    (materialized, positive) scale vector."""
    r = quat_to_rot(q)
    m = r * np.asarray(s, dtype=np.float64)[None, :]
    return m @ m.T


def build_covariances(quats: np.ndarray, scales: np.ndarray) -> np.ndarray:
    """Batched covariance construction: (N, 4), (N, 3) -> (N, 3, 3)."""
    r = quat_to_rot(quats)
    m = r * scales[:, None, :]
    return m @ np.swapaxes(m, 1, 2)


def eval_gaussian(mu: np.ndarray, cov: np.ndarray, x: np.ndarray) -> float:
    """Unnormalized Gaussian density exp(-0.5 (x-mu)^T Sigma^-1 (x-mu)).

    A near-singular covariance (collapsed tracked Gaussian) is regularized by
    adding 1e-8 I once; if it is still not solvable a NumericsError is raised.
    """
    d = np.asarray(x, dtype=np.float64) - np.asarray(mu, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    try:
        sol = np.linalg.solve(cov, d)
        if not np.all(np.isfinite(sol)):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        try:
            sol = np.linalg.solve(cov + 1e-8 * np.eye(3), d)
        except np.linalg.LinAlgError as exc:
            raise NumericsError("covariance is singular even after regularization") from exc
        if not np.all(np.isfinite(sol)):
            raise NumericsError("covariance is singular even after regularization")
    return float(np.exp(-0.5 * d @ sol))


# ---------------------------------------------------------------------------
# color
# ---------------------------------------------------------------------------


def num_sh_bands(degree: int) -> int:
    return (degree + 1) ** 2


def eval_sh(coeffs: np.ndarray, view_dir: np.ndarray) -> np.ndarray:
    """Evaluate real SH color for one Gaussian: coeffs (B, 3), unit view_dir.

    Returns the raw (unclamped) RGB; band count B determines the degree.
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    basis = sh_basis(coeffs.shape[0], np.asarray(view_dir, dtype=np.float64).reshape(1, 3))[0]
    return 0.5 + basis @ coeffs


def sh_basis(n_bands: int, dirs: np.ndarray) -> np.ndarray:
    """SH basis values for unit directions (N, 3); returns (N, n_bands)."""
    n = dirs.shape[0]
    out = np.empty((n, n_bands))
    out[:, 0] = SH_C0
    if n_bands == 1:
        return out
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    out[:, 1] = -SH_C1 * y
    out[:, 2] = SH_C1 * z
    out[:, 3] = -SH_C1 * x
    if n_bands == 4:
        return out
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    out[:, 4] = SH_C2[0] * xy
    out[:, 5] = SH_C2[1] * yz
    out[:, 6] = SH_C2[2] * (2 * zz - xx - yy)
    out[:, 7] = SH_C2[3] * xz
    out[:, 8] = SH_C2[4] * (xx - yy)
    if n_bands == 9:
        return out
    out[:, 9] = SH_C3[0] * y * (3 * xx - yy)
    out[:, 10] = SH_C3[1] * xy * z
    out[:, 11] = SH_C3[2] * y * (4 * zz - xx - yy)
    out[:, 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
    out[:, 13] = SH_C3[4] * x * (4 * zz - xx - yy)
    out[:, 14] = SH_C3[5] * z * (xx - yy)
    out[:, 15] = SH_C3[6] * x * (xx - 3 * yy)
    return out


def color_of(g: "Gaussian", view_dir: np.ndarray) -> np.ndarray:
    """RGB in [0, 1] for a Gaussian seen from ``view_dir`` (unit vector).
    Degree 0 is view-independent by construction."""
    return np.clip(eval_sh(g.color, view_dir), 0.0, 1.0)


def rgb_to_dc(rgb: np.ndarray) -> np.ndarray:
    """Band-0 coefficients that reproduce ``rgb`` exactly (before clamping)."""
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


# ---------------------------------------------------------------------------
# scene containers
# ---------------------------------------------------------------------------


@dataclass
class Gaussian:
    """One Gaussian as a plain record (convenience view onto SceneModel rows)."""

    mu: np.ndarray
    q: np.ndarray
    log_scale: np.ndarray
    color: np.ndarray  # (B, 3) SH coefficients
    opacity_logit: float
    tracked: bool = False

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.opacity_logit)))

    def covariance(self) -> np.ndarray:
        return build_covariance(self.q, self.scale)


@dataclass
class SceneModel:
    """All Gaussians of a scene, stored column-wise.

    Tracked Gaussians always occupy the leading rows, so pruning (which only
    ever removes untracked rows) leaves ``track_index`` valid.
    """

    means: np.ndarray  # (N, 3)
    quats: np.ndarray  # (N, 4), raw; normalized on use
    log_scales: np.ndarray  # (N, 3)
    colors: np.ndarray  # (N, B, 3)
    opacity_logits: np.ndarray  # (N,)
    tracked: np.ndarray  # (N,) bool
    track_index: dict[int, int] = field(default_factory=dict)
    bounding_radius: float = 1.0

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 3)
        self.quats = np.asarray(self.quats, dtype=np.float64).reshape(-1, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64)
        if self.colors.ndim == 2:
            self.colors = self.colors[:, None, :]
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(-1)
        self.tracked = np.asarray(self.tracked, dtype=bool).reshape(-1)

    @property
    def n(self) -> int:
        return self.means.shape[0]

    @property
    def n_bands(self) -> int:
        return self.colors.shape[1]

    @property
    def sh_degree(self) -> int:
        return int(round(self.n_bands**0.5)) - 1

    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def opacities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logits))

    def covariances(self) -> np.ndarray:
        return build_covariances(self.quats, self.scales())

    def gaussian(self, i: int) -> Gaussian:
        return Gaussian(
            mu=self.means[i].copy(),
            q=quat_normalize(self.quats[i]),
            log_scale=self.log_scales[i].copy(),
            color=self.colors[i].copy(),
            opacity_logit=float(self.opacity_logits[i]),
            tracked=bool(self.tracked[i]),
        )

    def copy(self) -> "SceneModel":
        return SceneModel(
            means=self.means.copy(),
            quats=self.quats.copy(),
            log_scales=self.log_scales.copy(),
            colors=self.colors.copy(),
            opacity_logits=self.opacity_logits.copy(),
            tracked=self.tracked.copy(),
            track_index=dict(self.track_index),
            bounding_radius=self.bounding_radius,
        )

    def append(self, means, quats, log_scales, colors, opacity_logits, tracked) -> None:
        self.means = np.concatenate([self.means, np.atleast_2d(means)])
        self.quats = np.concatenate([self.quats, np.atleast_2d(quats)])
        self.log_scales = np.concatenate([self.log_scales, np.atleast_2d(log_scales)])
        colors = np.asarray(colors, dtype=np.float64)
        if colors.ndim == 2:
            colors = colors[:, None, :]
        self.colors = np.concatenate([self.colors, colors])
        self.opacity_logits = np.concatenate([self.opacity_logits, np.atleast_1d(opacity_logits)])
        self.tracked = np.concatenate([self.tracked, np.atleast_1d(tracked).astype(bool)])

    def remove(self, mask: np.ndarray) -> None:
        """Drop rows where ``mask`` is True; refuses to drop tracked rows."""
        mask = np.asarray(mask, dtype=bool)
        if np.any(mask & self.tracked):
            raise ValueError("tracked Gaussians cannot be removed")
        keep = ~mask
        self.means = self.means[keep]
        self.quats = self.quats[keep]
        self.log_scales = self.log_scales[keep]
        self.colors = self.colors[keep]
        self.opacity_logits = self.opacity_logits[keep]
        self.tracked = self.tracked[keep]


def init_track_gaussians(tracks, k, poses, images=None, sh_degree: int = 0) -> SceneModel:
    """Create one tracked Gaussian per track point.

    Track points must already be triangulated (``tracks.init_track_points``);
    if not, they are filled here from the stored depth samples. Centroids
    come from the track points; orientation is identity, opacity starts at
    0.5, and the base color is the mean of the observed pixel colors across
    the track's images (mid-gray when no images are given). The initial
    scale is isotropic at each point's mean 3-nearest-neighbor distance,
    clamped to [0.01, 0.1] x bounding radius: large enough that the first
    renders carry photometric signal, while the scale loss shrinks the
    tracked Gaussians toward surface points later.
    """
    from . import tracks as tracks_mod

    if len(tracks.tracks) == 0:
        raise ValueError("track set is empty")
    if any(t.point is None for t in tracks.tracks):
        tracks = tracks_mod.init_track_points(tracks, k, poses)

    pts = np.array([t.point for t in tracks.tracks])
    centroid = pts.mean(axis=0)
    bounding_radius = float(np.max(np.linalg.norm(pts - centroid, axis=1)))
    if bounding_radius <= 0:
        bounding_radius = 1.0

    n = pts.shape[0]
    if n > 1:
        d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=2)
        np.fill_diagonal(d2, np.inf)
        knn = min(3, n - 1)
        nn = np.sqrt(np.sort(d2, axis=1)[:, :knn]).mean(axis=1)
        scales = np.clip(nn, 0.01 * bounding_radius, 0.1 * bounding_radius)
    else:
        scales = np.full(1, 0.05 * bounding_radius)

    bands = num_sh_bands(sh_degree)
    colors = np.zeros((n, bands, 3))
    if images is not None:
        for i, tr in enumerate(tracks.tracks):
            samples = [
                bilinear_sample(images[obs.image_id], obs.pixel[None, :])[0]
                for obs in tr.observations
            ]
            colors[i, 0] = rgb_to_dc(np.mean(samples, axis=0))
    scene = SceneModel(
        means=pts,
        quats=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        log_scales=np.repeat(np.log(scales)[:, None], 3, axis=1),
        colors=colors,
        opacity_logits=np.zeros(n),  # sigmoid(0) = 0.5
        tracked=np.ones(n, dtype=bool),
        track_index={tr.track_id: i for i, tr in enumerate(tracks.tracks)},
        bounding_radius=bounding_radius,
    )
    return scene
