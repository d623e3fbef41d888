"""Forward splatting and the analytic backward pass.

The forward path projects each Gaussian to a screen-space ellipse (mean via
the pinhole map, covariance via the first-order Jacobian approximation
Sigma2D = J R Sigma R^T J^T), sorts by view depth, and alpha-blends
front-to-back per pixel. The backward path propagates an upstream image
gradient to every Gaussian parameter, to the camera pose (both through the
transformed center and through the rotation inside the covariance
projection), and to the focal lengths:

    dL/dfx = (tx/tz) dL/dmu'_x + <dL/d(JR) R^T, dJ/dfx>

with dL/d(JR) assembled from the covariance-path gradient. All math runs in
double precision; gradients match central finite differences of the rendered
image to the tolerances pinned in the acceptance suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import PointClipped
from .geometry import CameraIntrinsics, CameraPose, RenderSettings, d_exp_so3
from .scene import SceneModel, d_rot_d_quat, quat_to_rot, sh_basis

__all__ = [
    "ProjectedGaussians",
    "ProjectedGaussian",
    "RenderOutput",
    "GradientBundle",
    "project_gaussians",
    "project_gaussian",
    "render",
    "render_backward",
    "render_tracked_projections",
    "tracked_projection_backward",
    "COV2D_FLOOR",
    "TILE_SIZE",
]

# low-pass floor added to the projected covariance diagonal (px^2); constant
# in the backward pass
COV2D_FLOOR = 0.3
TILE_SIZE = 16
ALPHA_MAX = 0.9999


@dataclass
class ProjectedGaussians:
    """Visible splats of one view, depth-sorted, stored column-wise.

    ``jr`` is the 2x3 product J @ R_cw (the affine screen transform the
    covariance gradient flows through); ``source_index`` maps each row back
    to its SceneModel row.
    """

    mu2d: np.ndarray  # (V, 2)
    cov2d: np.ndarray  # (V, 2, 2), floor included
    conic: np.ndarray  # (V, 3) packed inverse covariance (a, b, c)
    depth: np.ndarray  # (V,)
    j: np.ndarray  # (V, 2, 3)
    jr: np.ndarray  # (V, 2, 3)
    rgb: np.ndarray  # (V, 3) clamped colors
    rgb_interior: np.ndarray  # (V, 3) bool: inside the [0,1] clamp
    opacity: np.ndarray  # (V,)
    source_index: np.ndarray  # (V,) int
    tpoints: np.ndarray  # (V, 3) camera-space centers
    cov_world: np.ndarray  # (V, 3, 3)
    bounds: np.ndarray  # (V, 4) inclusive pixel bbox (x0, x1, y0, y1)

    @property
    def count(self) -> int:
        return self.mu2d.shape[0]


@dataclass
class ProjectedGaussian:
    """Single-splat view of a ProjectedGaussians row."""

    mu2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    j: np.ndarray
    jr: np.ndarray
    rgb: np.ndarray
    opacity: float
    source_index: int


@dataclass
class RenderOutput:
    """Rendered image plus everything the backward pass consumes."""

    image: np.ndarray  # (H, W, 3)
    alpha_map: np.ndarray  # (H, W)
    tracked_projections: dict  # track id -> pixel (2,)
    clipped_tracks: set
    records_retained: bool
    rec_offsets: np.ndarray | None = None  # (H*W + 1,)
    rec_id: np.ndarray | None = None  # rank into projected arrays
    rec_alpha: np.ndarray | None = None
    rec_weight: np.ndarray | None = None
    projected: ProjectedGaussians | None = None
    settings: RenderSettings | None = None

    def records_at(self, px: int, py: int) -> list:
        """Ordered (gaussian id, blend weight, alpha) contributions of one pixel."""
        if not self.records_retained:
            raise ValueError("render was run without record retention")
        h, w = self.image.shape[:2]
        idx = py * w + px
        lo, hi = self.rec_offsets[idx], self.rec_offsets[idx + 1]
        src = self.projected.source_index
        return [
            (int(src[self.rec_id[r]]), float(self.rec_weight[r]), float(self.rec_alpha[r]))
            for r in range(lo, hi)
        ]


@dataclass
class GradientBundle:
    """Gradients for every Gaussian parameter, one camera pose, and the
    shared focal lengths (pixel units). Rows of culled Gaussians stay zero."""

    d_means: np.ndarray
    d_quats: np.ndarray
    d_log_scales: np.ndarray
    d_colors: np.ndarray
    d_opacity_logits: np.ndarray
    d_rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    d_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    dfx: float = 0.0
    dfy: float = 0.0
    d_mu2d_norm: np.ndarray | None = None  # per-Gaussian screen-gradient norms

    @classmethod
    def zeros(cls, scene: SceneModel) -> "GradientBundle":
        return cls(
            d_means=np.zeros_like(scene.means),
            d_quats=np.zeros_like(scene.quats),
            d_log_scales=np.zeros_like(scene.log_scales),
            d_colors=np.zeros_like(scene.colors),
            d_opacity_logits=np.zeros_like(scene.opacity_logits),
            d_mu2d_norm=np.zeros(scene.n),
        )

    def add_(self, other: "GradientBundle") -> "GradientBundle":
        self.d_means += other.d_means
        self.d_quats += other.d_quats
        self.d_log_scales += other.d_log_scales
        self.d_colors += other.d_colors
        self.d_opacity_logits += other.d_opacity_logits
        self.d_rotation += other.d_rotation
        self.d_translation += other.d_translation
        self.dfx += other.dfx
        self.dfy += other.dfy
        if self.d_mu2d_norm is not None and other.d_mu2d_norm is not None:
            self.d_mu2d_norm += other.d_mu2d_norm
        return self


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _view_colors(scene: SceneModel, rows: np.ndarray, cam_center: np.ndarray):
    """Clamped RGB (and interior mask) for the given scene rows.

    For view-dependent bands the direction is evaluated at each Gaussian
    center and treated as a constant of the render: its dependence on the
    center and pose is deliberately excluded from the backward pass (exact
    for the default degree 0).
    """
    if scene.n_bands == 1:
        basis = np.full((rows.shape[0], 1), sh_basis(1, np.zeros((1, 3)))[0, 0])
    else:
        dirs = scene.means[rows] - cam_center
        norms = np.maximum(np.linalg.norm(dirs, axis=1, keepdims=True), 1e-12)
        basis = sh_basis(scene.n_bands, dirs / norms)
    raw = 0.5 + np.einsum("vb,vbc->vc", basis, scene.colors[rows])
    return np.clip(raw, 0.0, 1.0), (raw > 0.0) & (raw < 1.0), basis


def project_gaussians(
    scene: SceneModel,
    pose: CameraPose,
    k: CameraIntrinsics,
    settings: RenderSettings,
) -> ProjectedGaussians:
    """Project every Gaussian of a scene into one view; depth-sorted output.

    Culls splats behind the near plane, past the far plane, or whose
    sigma_cutoff extent misses the image entirely.
    """
    r_cw = pose.rotation_matrix()
    tpts = scene.means @ r_cw.T + pose.translation
    infront = (tpts[:, 2] > settings.near) & (tpts[:, 2] < settings.far)
    rows = np.nonzero(infront)[0]

    empty = ProjectedGaussians(
        mu2d=np.zeros((0, 2)), cov2d=np.zeros((0, 2, 2)), conic=np.zeros((0, 3)),
        depth=np.zeros(0), j=np.zeros((0, 2, 3)), jr=np.zeros((0, 2, 3)),
        rgb=np.zeros((0, 3)), rgb_interior=np.zeros((0, 3), dtype=bool),
        opacity=np.zeros(0), source_index=np.zeros(0, dtype=np.int64),
        tpoints=np.zeros((0, 3)), cov_world=np.zeros((0, 3, 3)),
        bounds=np.zeros((0, 4), dtype=np.int64),
    )
    if rows.size == 0:
        return empty

    tv = tpts[rows]
    z = tv[:, 2]
    jac = np.zeros((rows.size, 2, 3))
    jac[:, 0, 0] = k.fx / z
    jac[:, 1, 1] = k.fy / z
    jac[:, 0, 2] = -k.fx * tv[:, 0] / (z * z)
    jac[:, 1, 2] = -k.fy * tv[:, 1] / (z * z)
    jr = jac @ r_cw
    cov_world = scene.covariances()[rows]
    cov2d = jr @ cov_world @ np.swapaxes(jr, 1, 2)
    cov2d[:, 0, 0] += COV2D_FLOOR
    cov2d[:, 1, 1] += COV2D_FLOOR

    mu2d = np.stack([k.fx * tv[:, 0] / z + k.cx, k.fy * tv[:, 1] / z + k.cy], axis=1)

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    mid = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = settings.sigma_cutoff * np.sqrt(lam_max)

    x0 = np.floor(mu2d[:, 0] - radius - 0.5).astype(np.int64)
    x1 = np.ceil(mu2d[:, 0] + radius - 0.5).astype(np.int64)
    y0 = np.floor(mu2d[:, 1] - radius - 0.5).astype(np.int64)
    y1 = np.ceil(mu2d[:, 1] + radius - 0.5).astype(np.int64)
    onscreen = (x1 >= 0) & (x0 <= k.width - 1) & (y1 >= 0) & (y0 <= k.height - 1)
    if not np.any(onscreen):
        return empty

    keep = np.nonzero(onscreen)[0]
    order = keep[np.lexsort((rows[keep], z[keep]))]  # depth, then index, ascending

    bounds = np.stack(
        [
            np.clip(x0[order], 0, k.width - 1),
            np.clip(x1[order], 0, k.width - 1),
            np.clip(y0[order], 0, k.height - 1),
            np.clip(y1[order], 0, k.height - 1),
        ],
        axis=1,
    )

    c2d = cov2d[order]
    dets = det[order]
    conic = np.stack(
        [c2d[:, 1, 1] / dets, -c2d[:, 0, 1] / dets, c2d[:, 0, 0] / dets], axis=1
    )
    rgb, interior, _ = _view_colors(scene, rows[order], pose.camera_center())

    return ProjectedGaussians(
        mu2d=np.ascontiguousarray(mu2d[order]),
        cov2d=c2d,
        conic=np.ascontiguousarray(conic),
        depth=z[order],
        j=jac[order],
        jr=jr[order],
        rgb=np.ascontiguousarray(rgb),
        rgb_interior=interior,
        opacity=np.ascontiguousarray(_sigmoid(scene.opacity_logits[rows[order]])),
        source_index=rows[order],
        tpoints=tv[order],
        cov_world=cov_world[order],
        bounds=bounds,
    )


def project_gaussian(gaussian, pose, k, settings) -> ProjectedGaussian | None:
    """Scalar wrapper over :func:`project_gaussians`; None when culled."""
    single = SceneModel(
        means=gaussian.mu[None],
        quats=gaussian.q[None],
        log_scales=gaussian.log_scale[None],
        colors=gaussian.color[None],
        opacity_logits=[gaussian.opacity_logit],
        tracked=[gaussian.tracked],
    )
    p = project_gaussians(single, pose, k, settings)
    if p.count == 0:
        return None
    return ProjectedGaussian(
        mu2d=p.mu2d[0], cov2d=p.cov2d[0], depth=float(p.depth[0]), j=p.j[0],
        jr=p.jr[0], rgb=p.rgb[0], opacity=float(p.opacity[0]), source_index=0,
    )


def render(
    scene: SceneModel,
    pose: CameraPose,
    k: CameraIntrinsics,
    settings: RenderSettings | None = None,
    retain_records: bool = True,
) -> RenderOutput:
    """Render one view over a black background.

    ``retain_records`` keeps the per-pixel contribution lists required by
    :func:`render_backward`. Projections of tracked Gaussians are recorded
    whether or not they are visible (behind-camera ones are listed in
    ``clipped_tracks``).
    """
    if scene.n == 0:
        raise ValueError("scene is empty")
    settings = settings or RenderSettings()
    h, w = k.height, k.width

    proj = project_gaussians(scene, pose, k, settings)
    tracked_px, clipped = render_tracked_projections(scene, pose, k, settings)

    image = np.zeros((h, w, 3))
    final_t = np.ones((h, w))
    out = RenderOutput(
        image=image,
        alpha_map=np.zeros((h, w)),
        tracked_projections=tracked_px,
        clipped_tracks=clipped,
        records_retained=retain_records,
        projected=proj,
        settings=settings,
    )
    if proj.count == 0:
        if retain_records:
            out.rec_offsets = np.zeros(h * w + 1, dtype=np.int64)
            out.rec_id = np.zeros(0, dtype=np.int64)
            out.rec_alpha = np.zeros(0)
            out.rec_weight = np.zeros(0)
        return out

    n_tiles_x = (w + TILE_SIZE - 1) // TILE_SIZE
    n_tiles_y = (h + TILE_SIZE - 1) // TILE_SIZE
    tile_bounds = np.stack(
        [
            proj.bounds[:, 0] // TILE_SIZE,
            proj.bounds[:, 1] // TILE_SIZE,
            proj.bounds[:, 2] // TILE_SIZE,
            proj.bounds[:, 3] // TILE_SIZE,
        ],
        axis=1,
    )
    tile_offsets, tile_lists = _kernels.build_tile_lists(tile_bounds, n_tiles_x, n_tiles_y)
    sigma_max = 0.5 * settings.sigma_cutoff**2

    if retain_records:
        counts = _kernels.count_contributions(
            proj.mu2d, proj.conic, proj.opacity, tile_offsets, tile_lists,
            h, w, TILE_SIZE, n_tiles_x, n_tiles_y, settings.alpha_cutoff, sigma_max,
        )
        rec_offsets = np.zeros(h * w + 1, dtype=np.int64)
        np.cumsum(counts, out=rec_offsets[1:])
        rec_id = np.empty(rec_offsets[-1], dtype=np.int64)
        rec_alpha = np.empty(rec_offsets[-1])
        rec_weight = np.empty(rec_offsets[-1])
        out.rec_offsets, out.rec_id = rec_offsets, rec_id
        out.rec_alpha, out.rec_weight = rec_alpha, rec_weight
    else:
        rec_offsets = np.zeros(1, dtype=np.int64)
        rec_id = np.zeros(0, dtype=np.int64)
        rec_alpha = np.zeros(0)
        rec_weight = np.zeros(0)

    _kernels.blend_forward(
        proj.mu2d, proj.conic, proj.rgb, proj.opacity, tile_offsets, tile_lists,
        h, w, TILE_SIZE, n_tiles_x, n_tiles_y, settings.alpha_cutoff, sigma_max,
        ALPHA_MAX, retain_records, rec_offsets, rec_id, rec_alpha,
        rec_weight, image, final_t,
    )
    out.alpha_map = 1.0 - final_t
    return out


def render_tracked_projections(
    scene: SceneModel,
    pose: CameraPose,
    k: CameraIntrinsics,
    settings: RenderSettings | None = None,
) -> tuple[dict, set]:
    """Pinhole projections of every tracked Gaussian center.

    Off-image projections are still reported (the track loss needs them);
    only behind-camera points are excluded, returned in the clipped set.
    """
    settings = settings or RenderSettings()
    projections: dict[int, np.ndarray] = {}
    clipped: set[int] = set()
    if not scene.track_index:
        return projections, clipped
    r_cw = pose.rotation_matrix()
    for tid, row in scene.track_index.items():
        t = r_cw @ scene.means[row] + pose.translation
        if t[2] <= settings.near:
            clipped.add(tid)
            continue
        projections[tid] = np.array(
            [k.fx * t[0] / t[2] + k.cx, k.fy * t[1] / t[2] + k.cy]
        )
    return projections, clipped


def render_backward(
    out: RenderOutput,
    d_image: np.ndarray,
    scene: SceneModel,
    pose: CameraPose,
    k: CameraIntrinsics,
) -> GradientBundle:
    """Propagate an upstream image gradient to all parameters of one view.

    Requires a RenderOutput produced with record retention. The chain is:
    blend adjoint (records) -> screen-space mean/conic/color/opacity
    gradients -> camera-space point, world covariance, pose, and focal
    gradients.
    """
    if not out.records_retained:
        raise ValueError("render_backward needs records; re-render with retain_records=True")
    bundle = GradientBundle.zeros(scene)
    proj = out.projected
    if proj.count == 0:
        return bundle
    h, w = out.image.shape[:2]
    d_image = np.ascontiguousarray(d_image, dtype=np.float64)

    v = proj.count
    d_mu2d = np.zeros((v, 2))
    d_conic_mat = np.zeros((v, 3))
    d_rgb = np.zeros((v, 3))
    d_opacity = np.zeros(v)
    _kernels.blend_backward(
        d_image, proj.mu2d, proj.conic, proj.rgb, proj.opacity,
        out.rec_offsets, out.rec_id, out.rec_alpha, out.rec_weight,
        h, w, ALPHA_MAX, d_mu2d, d_conic_mat, d_rgb, d_opacity,
    )

    # conic (inverse covariance) -> projected covariance: dSigma' = -A dA A
    a_mat = np.empty((v, 2, 2))
    a_mat[:, 0, 0] = proj.conic[:, 0]
    a_mat[:, 0, 1] = a_mat[:, 1, 0] = proj.conic[:, 1]
    a_mat[:, 1, 1] = proj.conic[:, 2]
    da = np.empty((v, 2, 2))
    da[:, 0, 0] = d_conic_mat[:, 0]
    da[:, 0, 1] = da[:, 1, 0] = d_conic_mat[:, 1]
    da[:, 1, 1] = d_conic_mat[:, 2]
    d_cov2d = -a_mat @ da @ a_mat

    # covariance path: Sigma' = (JR) Sigma (JR)^T
    g_sym = d_cov2d + np.swapaxes(d_cov2d, 1, 2)
    d_jr = g_sym @ proj.jr @ proj.cov_world  # dL/d(JR), (V, 2, 3)
    r_cw = pose.rotation_matrix()
    d_j = d_jr @ r_cw.T
    d_r_direct = np.swapaxes(proj.j, 1, 2) @ d_jr  # (V, 3, 3)
    d_cov_world = np.swapaxes(proj.jr, 1, 2) @ d_cov2d @ proj.jr

    # J(t) chain: camera-space point gradient from both paths
    tx, ty, z = proj.tpoints[:, 0], proj.tpoints[:, 1], proj.tpoints[:, 2]
    z2, z3 = z * z, z**3
    d_t = np.einsum("vij,vi->vj", proj.j, d_mu2d)  # mean path: J^T dmu'
    d_t[:, 0] += -k.fx / z2 * d_j[:, 0, 2]
    d_t[:, 1] += -k.fy / z2 * d_j[:, 1, 2]
    d_t[:, 2] += (
        -k.fx / z2 * d_j[:, 0, 0]
        - k.fy / z2 * d_j[:, 1, 1]
        + 2.0 * k.fx * tx / z3 * d_j[:, 0, 2]
        + 2.0 * k.fy * ty / z3 * d_j[:, 1, 2]
    )

    # focal gradients (pixel units)
    bundle.dfx = float(
        np.sum(d_mu2d[:, 0] * tx / z + d_j[:, 0, 0] / z - d_j[:, 0, 2] * tx / z2)
    )
    bundle.dfy = float(
        np.sum(d_mu2d[:, 1] * ty / z + d_j[:, 1, 1] / z - d_j[:, 1, 2] * ty / z2)
    )

    src = proj.source_index
    np.add.at(bundle.d_mu2d_norm, src, np.linalg.norm(d_mu2d, axis=1))
    # Gaussian centers and camera pose
    np.add.at(bundle.d_means, src, d_t @ r_cw)
    bundle.d_translation = d_t.sum(axis=0)
    mu_world = scene.means[src]
    d_r_cw = np.einsum("vi,vj->ij", d_t, mu_world) + d_r_direct.sum(axis=0)
    dr_dv = d_exp_so3(pose.rotation)
    bundle.d_rotation = np.array([np.sum(d_r_cw * dr_dv[i]) for i in range(3)])

    # world covariance -> quaternion and log-scale
    scales = np.exp(scene.log_scales[src])
    rq = quat_to_rot(scene.quats[src])
    m = rq * scales[:, None, :]
    d_m = (d_cov_world + np.swapaxes(d_cov_world, 1, 2)) @ m
    d_scales = np.einsum("vij,vij->vj", rq, d_m)
    np.add.at(bundle.d_log_scales, src, d_scales * scales)
    d_rq = d_m * scales[:, None, :]
    dr_dq = d_rot_d_quat(scene.quats[src])  # (V, 4, 3, 3)
    np.add.at(bundle.d_quats, src, np.einsum("vij,vaij->va", d_rq, dr_dq))

    # colors and opacity
    _, interior, basis = _view_colors(scene, src, pose.camera_center())
    d_rgb_masked = d_rgb * interior
    np.add.at(bundle.d_colors, src, basis[:, :, None] * d_rgb_masked[:, None, :])
    op = proj.opacity
    np.add.at(bundle.d_opacity_logits, src, d_opacity * op * (1.0 - op))
    return bundle


def tracked_projection_backward(
    scene: SceneModel,
    pose: CameraPose,
    k: CameraIntrinsics,
    d_projections: dict,
    settings: RenderSettings | None = None,
) -> GradientBundle:
    """Adjoint of :func:`render_tracked_projections` for a dict of upstream
    pixel gradients keyed by track id (clipped tracks are simply absent)."""
    settings = settings or RenderSettings()
    bundle = GradientBundle.zeros(scene)
    if not d_projections:
        return bundle
    r_cw = pose.rotation_matrix()
    dr_dv = d_exp_so3(pose.rotation)
    d_r_cw = np.zeros((3, 3))
    for tid, dpx in d_projections.items():
        row = scene.track_index[tid]
        mu = scene.means[row]
        t = r_cw @ mu + pose.translation
        if t[2] <= settings.near:
            continue
        z, z2 = t[2], t[2] * t[2]
        jac = np.array(
            [[k.fx / z, 0.0, -k.fx * t[0] / z2], [0.0, k.fy / z, -k.fy * t[1] / z2]]
        )
        d_t = jac.T @ np.asarray(dpx, dtype=np.float64)
        bundle.d_means[row] += r_cw.T @ d_t
        bundle.d_translation += d_t
        d_r_cw += np.outer(d_t, mu)
        bundle.dfx += dpx[0] * t[0] / z
        bundle.dfy += dpx[1] * t[1] / z
    bundle.d_rotation = np.array([np.sum(d_r_cw * dr_dv[i]) for i in range(3)])
    return bundle
