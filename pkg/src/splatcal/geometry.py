"""Rigid-body transforms, pinhole projection, and projection Jacobians.

Everything here is pure and double precision. Scalar entry points operate on
single points and raise :class:`PointClipped` for unusable depths; the
``*_many`` variants are vectorized over leading axes and return validity masks
instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import PointClipped

__all__ = [
    "CameraIntrinsics",
    "CameraPose",
    "RenderSettings",
    "CameraPoint",
    "intrinsics_from_fov",
    "fov_of",
    "hat_so3",
    "exp_so3",
    "log_so3",
    "d_exp_so3",
    "canonicalize_axis_angle",
    "transform_point",
    "transform_points",
    "project_point",
    "project_points",
    "projection_jacobian",
    "projection_jacobians",
    "project_point_clipspace",
]


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass
class CameraIntrinsics:
    """Pinhole intrinsics in pixel units. The principal point sits at the
    image center at construction time and is never optimized."""

    fx: float
    fy: float
    width: int
    height: int
    cx: float = field(default=None)  # type: ignore[assignment]
    cy: float = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image size must be >= 1, got {self.width}x{self.height}")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.cx is None:
            self.cx = self.width / 2.0
        if self.cy is None:
            self.cy = self.height / 2.0

    @property
    def half_diagonal(self) -> float:
        return math.hypot(self.cx, self.cy)

    def matrix(self) -> np.ndarray:
        """3x3 calibration matrix K."""
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def with_focal(self, fx: float, fy: float) -> "CameraIntrinsics":
        return CameraIntrinsics(fx=fx, fy=fy, width=self.width, height=self.height)


@dataclass
class CameraPose:
    """World-to-camera rigid transform [R|t], with the rotation stored as an
    axis-angle 3-vector (magnitude = rotation angle in radians)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3).copy()
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3).copy()

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, rotation_matrix: np.ndarray, translation: np.ndarray) -> "CameraPose":
        return cls(log_so3(rotation_matrix), np.asarray(translation, dtype=np.float64))

    def rotation_matrix(self) -> np.ndarray:
        return exp_so3(self.rotation)

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous world-to-camera matrix."""
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix()
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "CameraPose":
        r = self.rotation_matrix()
        return CameraPose.from_matrix(r.T, -r.T @ self.translation)

    def compose(self, other: "CameraPose") -> "CameraPose":
        """self after other: returns the transform x -> self(other(x))."""
        ra, rb = self.rotation_matrix(), other.rotation_matrix()
        return CameraPose.from_matrix(ra @ rb, ra @ other.translation + self.translation)

    def camera_center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        r = self.rotation_matrix()
        return -r.T @ self.translation

    def canonicalized(self) -> "CameraPose":
        return CameraPose(canonicalize_axis_angle(self.rotation), self.translation)

    def copy(self) -> "CameraPose":
        return CameraPose(self.rotation.copy(), self.translation.copy())


@dataclass
class RenderSettings:
    """Clip distances and splat cutoffs shared by the projector and blender."""

    near: float = 0.01
    far: float = 100.0
    alpha_cutoff: float = 1.0 / 255.0
    sigma_cutoff: float = 3.0

    def __post_init__(self):
        if not (0 < self.near < self.far):
            raise ValueError(f"need 0 < near < far, got near={self.near}, far={self.far}")
        if not (0 < self.alpha_cutoff < 1):
            raise ValueError(f"alpha_cutoff must be in (0,1), got {self.alpha_cutoff}")
        if self.sigma_cutoff <= 0:
            raise ValueError(f"sigma_cutoff must be positive, got {self.sigma_cutoff}")


@dataclass
class CameraPoint:
    """Homogeneous camera-space point (tw = 1 for points from affine transforms)."""

    tx: float
    ty: float
    tz: float
    tw: float = 1.0

    def xyz(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tz])


# ---------------------------------------------------------------------------
# intrinsics
# ---------------------------------------------------------------------------


def intrinsics_from_fov(width: int, height: int, fov_deg: float) -> CameraIntrinsics:
    """Build intrinsics from a diagonal field of view in degrees:
    fx = fy = sqrt(cx^2 + cy^2) / tan(fov/2)."""
    if not (0.0 < fov_deg < 180.0):
        raise ValueError(f"fov must be in (0, 180) degrees, got {fov_deg}")
    cx, cy = width / 2.0, height / 2.0
    f = math.hypot(cx, cy) / math.tan(math.radians(fov_deg) / 2.0)
    return CameraIntrinsics(fx=f, fy=f, width=width, height=height)


def fov_of(k: CameraIntrinsics) -> float:
    """Diagonal field of view in degrees implied by the focal length
    (mean of fx and fy when they differ)."""
    f = 0.5 * (k.fx + k.fy)
    return math.degrees(2.0 * math.atan2(k.half_diagonal, f))


# ---------------------------------------------------------------------------
# so(3)
# ---------------------------------------------------------------------------


def hat_so3(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix [v]x."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def exp_so3(axis_angle: np.ndarray) -> np.ndarray:
    """Rodrigues rotation: axis-angle 3-vector -> 3x3 rotation matrix."""
    v = np.asarray(axis_angle, dtype=np.float64).reshape(3)
    theta = np.linalg.norm(v)
    k = hat_so3(v)
    if theta < 1e-8:
        # second-order series; keeps the zero vector exact
        a = 1.0 - theta * theta / 6.0
        b = 0.5 - theta * theta / 24.0
    else:
        a = math.sin(theta) / theta
        b = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + a * k + b * (k @ k)


def _vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def log_so3(rotation: np.ndarray) -> np.ndarray:
    """Inverse of :func:`exp_so3`; returns the axis-angle vector with magnitude
    in [0, pi]. Stable down to the identity and up to angles near pi."""
    r = np.asarray(rotation, dtype=np.float64)
    cos_theta = float(np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0))
    theta = math.acos(cos_theta)
    w = _vee(r - r.T) / 2.0  # = sin(theta) * axis

    if theta < 1e-7:
        # theta/sin(theta) ~ 1 + theta^2/6
        return w * (1.0 + theta * theta / 6.0)
    if theta > math.pi - 1e-3:
        # near pi, sin(theta) loses precision; recover the axis from the
        # symmetric part: R + R^T = 2I + 2(1-cos)( a a^T - I )
        aat = np.eye(3) + (r + r.T - 2.0 * np.eye(3)) / (2.0 * (1.0 - cos_theta))
        axis = np.sqrt(np.clip(np.diag(aat), 0.0, None))
        # fix relative signs from the largest component's row
        k = int(np.argmax(axis))
        signs = np.sign(aat[k])
        signs[signs == 0] = 1.0
        axis = axis * signs * np.sign(axis[k] if axis[k] != 0 else 1.0)
        axis /= np.linalg.norm(axis)
        # overall sign from the antisymmetric part (vanishes only at exactly pi)
        if np.dot(axis, w) < 0:
            axis = -axis
        return theta * axis
    return w * (theta / math.sin(theta))


def d_exp_so3(axis_angle: np.ndarray) -> np.ndarray:
    """Derivative of the Rodrigues map: returns dR/dv as a (3, 3, 3) array
    where [i] is the 3x3 matrix dR/dv_i."""
    v = np.asarray(axis_angle, dtype=np.float64).reshape(3)
    theta = np.linalg.norm(v)
    out = np.empty((3, 3, 3))
    if theta < 1e-4:
        # dR/dv_i = [e_i]x + ([v]x [e_i]x + [e_i]x [v]x)/2 + O(theta^2)
        k = hat_so3(v)
        for i in range(3):
            e = hat_so3(np.eye(3)[i])
            out[i] = e + 0.5 * (k @ e + e @ k)
        return out
    r = exp_so3(v)
    for i in range(3):
        e = np.eye(3)[i]
        m = v[i] * hat_so3(v) + hat_so3(np.cross(v, (np.eye(3) - r) @ e))
        out[i] = (m / (theta * theta)) @ r
    return out


def canonicalize_axis_angle(v: np.ndarray) -> np.ndarray:
    """Wrap an axis-angle vector so its magnitude lies in [0, pi]."""
    v = np.asarray(v, dtype=np.float64).reshape(3).copy()
    theta = np.linalg.norm(v)
    if theta <= math.pi:
        return v
    # remove whole turns, then flip if still above pi
    turns = math.floor(theta / (2.0 * math.pi))
    theta_red = theta - turns * 2.0 * math.pi
    v = v * (theta_red / theta)
    if theta_red > math.pi:
        v = v * (1.0 - 2.0 * math.pi / theta_red)
    return v


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------


def transform_point(pose: CameraPose, p: np.ndarray) -> CameraPoint:
    """World point -> homogeneous camera-space point t = R p + t_cw."""
    t = pose.rotation_matrix() @ np.asarray(p, dtype=np.float64).reshape(3) + pose.translation
    return CameraPoint(t[0], t[1], t[2], 1.0)


def transform_points(pose: CameraPose, pts: np.ndarray) -> np.ndarray:
    """Vectorized world -> camera transform; pts is (N, 3)."""
    return np.asarray(pts, dtype=np.float64) @ pose.rotation_matrix().T + pose.translation


def project_point(k: CameraIntrinsics, t: CameraPoint, settings: RenderSettings) -> np.ndarray:
    """Pinhole projection of a camera-space point to pixel coordinates.

    Raises :class:`PointClipped` when the point is at or behind the near plane.
    """
    if t.tz <= settings.near:
        raise PointClipped(f"depth {t.tz} <= near plane {settings.near}")
    return np.array([k.fx * t.tx / t.tz + k.cx, k.fy * t.ty / t.tz + k.cy])


def project_points(
    k: CameraIntrinsics, tpts: np.ndarray, settings: RenderSettings
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection; returns (pixels (N,2), valid mask (N,)).

    Pixels of invalid points are computed against a clamped depth and should
    be ignored by callers.
    """
    tpts = np.asarray(tpts, dtype=np.float64)
    valid = tpts[:, 2] > settings.near
    z = np.where(valid, tpts[:, 2], 1.0)
    px = np.stack([k.fx * tpts[:, 0] / z + k.cx, k.fy * tpts[:, 1] / z + k.cy], axis=1)
    return px, valid


def projection_jacobian(k: CameraIntrinsics, t: CameraPoint) -> np.ndarray:
    """2x3 Jacobian of the pinhole projection at camera-space point t:
    [[fx/tz, 0, -fx*tx/tz^2], [0, fy/tz, -fy*ty/tz^2]]."""
    if t.tz <= 0:
        raise PointClipped(f"depth {t.tz} <= 0")
    z, z2 = t.tz, t.tz * t.tz
    return np.array(
        [[k.fx / z, 0.0, -k.fx * t.tx / z2], [0.0, k.fy / z, -k.fy * t.ty / z2]]
    )


def projection_jacobians(k: CameraIntrinsics, tpts: np.ndarray) -> np.ndarray:
    """Vectorized (N, 2, 3) projection Jacobians; callers must pre-filter tz > 0."""
    tpts = np.asarray(tpts, dtype=np.float64)
    n = tpts.shape[0]
    z = tpts[:, 2]
    z2 = z * z
    j = np.zeros((n, 2, 3))
    j[:, 0, 0] = k.fx / z
    j[:, 1, 1] = k.fy / z
    j[:, 0, 2] = -k.fx * tpts[:, 0] / z2
    j[:, 1, 2] = -k.fy * tpts[:, 1] / z2
    return j


def project_point_clipspace(
    k: CameraIntrinsics, t: CameraPoint, settings: RenderSettings
) -> np.ndarray:
    """Full-pipeline projection (projection matrix -> NDC -> viewport).

    Algebraically equivalent to :func:`project_point`; kept as an independent
    formulation for cross-checking. The viewport maps NDC x in [-1, 1] to
    [cx - w/2, cx + w/2] so that the two formulations agree exactly (a
    variant that adds a constant half-pixel shift exists in the wild; we use
    the center-consistent convention throughout).
    """
    if t.tz <= settings.near:
        raise PointClipped(f"depth {t.tz} <= near plane {settings.near}")
    n, f = settings.near, settings.far
    w, h = k.width, k.height
    p = np.array(
        [
            [2.0 * k.fx / w, 0.0, 0.0, 0.0],
            [0.0, 2.0 * k.fy / h, 0.0, 0.0],
            [0.0, 0.0, (f + n) / (f - n), -2.0 * f * n / (f - n)],
            [0.0, 0.0, 1.0, 0.0],
        ]
    )
    tp = p @ np.array([t.tx, t.ty, t.tz, t.tw])
    return np.array(
        [0.5 * w * tp[0] / tp[3] + k.cx, 0.5 * h * tp[1] / tp[3] + k.cy]
    )
