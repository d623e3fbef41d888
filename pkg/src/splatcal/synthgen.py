"""Ground-truth oracle generator: synthetic splat scenes, camera rigs,
exact or noisy correspondences, and depth maps.

Everything is a pure function of (seed, config), so regeneration is
bit-identical. Surface points are Gaussian centers on the outer shell of the
scene; a point is observed by a camera only when it is inside the frustum
and within a visibility cone around its outward normal, which mimics the
self-occlusion of an opaque object and makes co-visibility fall off with
camera separation. For orbit rigs, point normals avoid a wedge around the
camera ring's seam so every point's visible cameras form one contiguous arc.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraIntrinsics, CameraPose, RenderSettings, intrinsics_from_fov
from .rasterizer import render
from .scene import SceneModel, rgb_to_dc
from .seeds import substream
from .tracks import MatchGraph

__all__ = [
    "SyntheticScene",
    "generate_scene",
    "generate_observations",
    "render_ground_truth",
    "covisibility_tracks",
]

VISIBILITY_CONE_DEG = 60.0


@dataclass
class SyntheticScene:
    scene: SceneModel  # ground-truth splats
    k: CameraIntrinsics
    poses: list  # [CameraPose], world-to-camera, one per frame
    surface_points: np.ndarray  # (P, 3)
    surface_normals: np.ndarray  # (P, 3)
    visibility: np.ndarray  # (n_cameras, P) bool
    motion: str
    seed: int
    min_track_length: int = 3
    settings: RenderSettings = field(default_factory=RenderSettings)

    @property
    def n_cameras(self) -> int:
        return len(self.poses)


def _look_at(eye: np.ndarray, target: np.ndarray) -> CameraPose:
    """World-to-camera pose for a camera at ``eye`` looking at ``target``
    (camera axes: x right, y down, z forward; world up is +z)."""
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    down = np.array([0.0, 0.0, -1.0])
    right = np.cross(down, fwd)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    r_wc = np.stack([right, down, fwd], axis=1)  # camera axes as world columns
    r_cw = r_wc.T
    return CameraPose.from_matrix(r_cw, -r_cw @ eye)


def _camera_ring(rng, n_cameras: int, motion: str) -> list:
    poses = []
    if motion == "orbit":
        phase = rng.uniform(0, 2 * math.pi)
        for i in range(n_cameras):
            theta = 2 * math.pi * i / n_cameras
            eye = np.array(
                [
                    2.8 * math.cos(theta),
                    2.8 * math.sin(theta),
                    0.45 * math.sin(2 * theta + phase),
                ]
            )
            poses.append(_look_at(eye, np.zeros(3)))
    elif motion == "roam":
        phase = rng.uniform(0, 2 * math.pi)
        for i in range(n_cameras):
            t = i / n_cameras
            radius = 3.0 + 0.5 * math.sin(4 * math.pi * t + phase)
            theta = 2 * math.pi * t + 0.4 * math.sin(2 * math.pi * t)
            eye = np.array(
                [
                    radius * math.cos(theta),
                    radius * math.sin(theta),
                    0.7 * math.sin(2 * math.pi * t + phase),
                ]
            )
            target = 0.15 * np.array([math.sin(3 * theta), math.cos(2 * theta), 0.0])
            poses.append(_look_at(eye, target))
    else:
        raise ValueError(f"unknown motion pattern '{motion}' (use 'orbit' or 'roam')")
    return poses


def _point_visibility(s_points, s_normals, poses, k, settings, cone_deg):
    """(n_cameras, P) mask: in front, inside the image, and within the
    visibility cone of the point normal."""
    cos_cone = math.cos(math.radians(cone_deg))
    vis = np.zeros((len(poses), s_points.shape[0]), dtype=bool)
    for i, pose in enumerate(poses):
        t = s_points @ pose.rotation_matrix().T + pose.translation
        infront = (t[:, 2] > settings.near) & (t[:, 2] < settings.far)
        z = np.where(infront, t[:, 2], 1.0)
        u = k.fx * t[:, 0] / z + k.cx
        v = k.fy * t[:, 1] / z + k.cy
        inside = (u >= 1.0) & (u <= k.width - 1.0) & (v >= 1.0) & (v <= k.height - 1.0)
        to_cam = pose.camera_center()[None, :] - s_points
        to_cam = to_cam / np.linalg.norm(to_cam, axis=1, keepdims=True)
        facing = np.sum(to_cam * s_normals, axis=1) > cos_cone
        vis[i] = infront & inside & facing
    return vis


def generate_scene(
    seed: int,
    n_gaussians: int = 500,
    n_cameras: int = 20,
    motion: str = "orbit",
    n_tracks: int = 200,
    image_size: int = 64,
    fov_deg: float = 60.0,
    min_track_length: int = 3,
    sh_degree: int = 0,
    settings: RenderSettings | None = None,
    seam_margin_deg: float = 0.0,
    point_radius: tuple = (0.3, 1.0),
) -> SyntheticScene:
    """Deterministic synthetic scene: splats in the unit ball with bounded
    anisotropy, a camera rig, and surface points visible in at least
    ``min_track_length`` cameras each.

    ``seam_margin_deg`` > 0 (orbit only) keeps point normals away from the
    azimuth between the last and first camera, so no point is covisible
    across that pair: the spanning tree then provably connects every point's
    visible cameras, making extracted tracks equal the generator's
    co-visibility sets exactly. ``point_radius`` bounds the shell radii
    eligible as surface points.
    """
    if n_gaussians < 1:
        raise ValueError("need at least one Gaussian")
    if n_cameras < 3:
        raise ValueError("need at least three cameras")
    rng = substream(seed, "scene")
    settings = settings or RenderSettings()
    k = intrinsics_from_fov(image_size, image_size, fov_deg)
    poses = _camera_ring(rng, n_cameras, motion)

    # splats: uniform in the unit ball, moderate sizes, bounded anisotropy
    dirs = rng.normal(size=(n_gaussians, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = rng.uniform(0.0, 1.0, n_gaussians) ** (1.0 / 3.0)
    means = dirs * radii[:, None]
    base = rng.uniform(math.log(0.04), math.log(0.12), n_gaussians)
    aniso = rng.uniform(-math.log(1.8), math.log(1.8), (n_gaussians, 3))
    log_scales = base[:, None] + aniso
    n_bands = (sh_degree + 1) ** 2
    colors = np.zeros((n_gaussians, n_bands, 3))
    colors[:, 0, :] = rgb_to_dc(rng.uniform(0.1, 0.95, (n_gaussians, 3)))
    if n_bands > 1:
        colors[:, 1:, :] = rng.normal(0.0, 0.15, (n_gaussians, n_bands - 1, 3))
    quats = rng.normal(size=(n_gaussians, 4))
    opacity_logits = rng.uniform(0.0, 2.2, n_gaussians)

    scene = SceneModel(
        means=means,
        quats=quats,
        log_scales=log_scales,
        colors=colors,
        opacity_logits=opacity_logits,
        tracked=np.zeros(n_gaussians, dtype=bool),
        bounding_radius=float(np.max(np.linalg.norm(means - means.mean(axis=0), axis=1))),
    )

    # surface points: outer-shell splat centers
    norms_all = np.linalg.norm(means, axis=1)
    candidates = np.nonzero((norms_all >= point_radius[0]) & (norms_all <= point_radius[1]))[0]
    candidates = candidates[rng.permutation(candidates.size)]
    if motion == "orbit" and seam_margin_deg > 0:
        seam = -math.pi / n_cameras
        margin = math.radians(seam_margin_deg)
        azim = np.arctan2(means[candidates, 1], means[candidates, 0])
        delta = (azim - seam) % (2 * math.pi)
        candidates = candidates[(delta > margin) & (delta < 2 * math.pi - margin)]

    pts = means[candidates]
    normals = pts / np.linalg.norm(pts, axis=1, keepdims=True)
    vis = _point_visibility(pts, normals, poses, k, settings, VISIBILITY_CONE_DEG)
    good = np.nonzero(vis.sum(axis=0) >= min_track_length)[0]
    if good.size < n_tracks:
        raise ValueError(
            f"only {good.size} of the requested {n_tracks} surface points are visible "
            f"in >= {min_track_length} cameras; increase n_gaussians or n_cameras"
        )
    chosen = np.sort(good[:n_tracks])
    return SyntheticScene(
        scene=scene,
        k=k,
        poses=poses,
        surface_points=pts[chosen],
        surface_normals=normals[chosen],
        visibility=vis[:, chosen],
        motion=motion,
        seed=seed,
        min_track_length=min_track_length,
        settings=settings,
    )


def generate_observations(
    s: SyntheticScene,
    pixel_noise_sigma: float = 0.0,
    depth_noise_rel: float = 0.0,
) -> tuple[MatchGraph, list]:
    """Project the surface points into every camera and emit keypoints,
    pairwise matches, per-keypoint depth samples, and depth maps.

    Pixel noise is drawn once per (camera, point) so the same keypoint
    coordinate appears in every pair that references it; depth noise is
    multiplicative (relative), mimicking monocular-depth error.
    """
    rng = substream(s.seed, "observations")
    k = s.k
    n_cams, n_pts = s.visibility.shape

    keypoints, kp_depths, kp_point_ids = [], [], []
    depth_maps = []
    for i, pose in enumerate(s.poses):
        pids = np.nonzero(s.visibility[i])[0]
        t = s.surface_points[pids] @ pose.rotation_matrix().T + pose.translation
        z = t[:, 2]
        px = np.stack([k.fx * t[:, 0] / z + k.cx, k.fy * t[:, 1] / z + k.cy], axis=1)
        if pixel_noise_sigma > 0:
            px = px + pixel_noise_sigma * rng.normal(size=px.shape)
        depth = z.copy()
        if depth_noise_rel > 0:
            depth = depth * (1.0 + depth_noise_rel * rng.normal(size=z.shape))
        keypoints.append(px)
        kp_depths.append(depth)
        kp_point_ids.append(pids)

        # depth map: smooth background plus patches carrying the sampled
        # depths around each keypoint (bilinear reads near a keypoint then
        # reproduce its sample)
        dist_bg = float(np.linalg.norm(pose.camera_center()))
        dmap = np.full((k.height, k.width), dist_bg)
        order = np.argsort(pids)
        for j in order:
            cx_i = int(round(px[j, 0] - 0.5))
            cy_i = int(round(px[j, 1] - 0.5))
            x0, x1 = max(cx_i - 1, 0), min(cx_i + 2, k.width)
            y0, y1 = max(cy_i - 1, 0), min(cy_i + 2, k.height)
            dmap[y0:y1, x0:x1] = depth[j]
        depth_maps.append(dmap)

    matches = {}
    for i in range(n_cams):
        idx_i = {pid: n for n, pid in enumerate(kp_point_ids[i])}
        for j in range(i + 1, n_cams):
            common = np.nonzero(s.visibility[i] & s.visibility[j])[0]
            if common.size == 0:
                continue
            idx_j = {pid: n for n, pid in enumerate(kp_point_ids[j])}
            matches[(i, j)] = np.array(
                [[idx_i[pid], idx_j[pid]] for pid in common], dtype=np.int64
            )

    graph = MatchGraph(
        num_images=n_cams,
        keypoints=keypoints,
        matches=matches,
        keypoint_depths=kp_depths,
    )
    graph.point_ids = kp_point_ids  # generator-side bookkeeping for oracles
    return graph, depth_maps


def covisibility_tracks(s: SyntheticScene, graph: MatchGraph) -> list:
    """The generator's own tracks: for every surface point seen by at least
    ``min_track_length`` cameras, the sorted list of (camera, keypoint) pairs."""
    kp_point_ids = graph.point_ids
    tracks = []
    for pid in range(s.surface_points.shape[0]):
        cams = np.nonzero(s.visibility[:, pid])[0]
        if cams.size < s.min_track_length:
            continue
        members = []
        for c in cams:
            kp = int(np.nonzero(kp_point_ids[c] == pid)[0][0])
            members.append((int(c), kp))
        tracks.append(sorted(members))
    return tracks


def render_ground_truth(s: SyntheticScene, settings: RenderSettings | None = None) -> list:
    """Render every camera of the rig at the true parameters."""
    settings = settings or s.settings
    return [
        render(s.scene, pose, s.k, settings, retain_records=False).image
        for pose in s.poses
    ]
