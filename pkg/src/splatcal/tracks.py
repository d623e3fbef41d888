"""Initialization front-end: match graph, maximum spanning tree, global track
extraction, and depth-lifted relative-pose/intrinsics estimation.

The pipeline is: build a match graph from pairwise correspondences, take its
maximum spanning tree (edge weight = match count), union keypoints across
tree edges into global tracks, then estimate a shared focal scale and one
relative pose per tree edge by minimizing the reprojection error of
depth-lifted correspondences. Chaining the relative poses along the tree
yields absolute world-to-camera poses.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    CameraIntrinsics,
    CameraPose,
    d_exp_so3,
    exp_so3,
    projection_jacobians,
)

log = logging.getLogger(__name__)

__all__ = [
    "MatchGraph",
    "Observation",
    "Track",
    "TrackSet",
    "PoseGraph",
    "build_mst",
    "extract_tracks",
    "init_relative_poses",
    "chain_poses",
    "init_track_points",
    "refine_global",
    "lift",
    "best_root",
]

MIN_EDGE_MATCHES = 8


# ---------------------------------------------------------------------------
# containers
# ---------------------------------------------------------------------------


@dataclass
class MatchGraph:
    """Per-image keypoints plus pairwise correspondences between them.

    ``matches[(i, j)]`` (with i < j) is an integer array (K, 2) of keypoint
    indices; ``keypoint_depths[i]`` optionally carries one depth sample per
    keypoint of image i.
    """

    num_images: int
    keypoints: list  # [ (M_i, 2) float arrays ]
    matches: dict  # {(i, j): (K, 2) int array}, i < j
    keypoint_depths: list | None = None

    @property
    def weights(self) -> dict:
        return {e: m.shape[0] for e, m in self.matches.items()}

    def validate(self) -> None:
        for (i, j), m in self.matches.items():
            if not (0 <= i < j < self.num_images):
                raise ValueError(f"bad image pair {(i, j)}")
            if len(np.unique(m[:, 0])) != m.shape[0] or len(np.unique(m[:, 1])) != m.shape[0]:
                raise ValueError(f"matches for pair {(i, j)} are not one-to-one")


@dataclass
class Observation:
    image_id: int
    pixel: np.ndarray  # (2,)
    depth: float

    def __post_init__(self):
        self.pixel = np.asarray(self.pixel, dtype=np.float64).reshape(2)


@dataclass
class Track:
    track_id: int
    observations: list  # [Observation]
    point: np.ndarray | None = None  # world 3-vector once triangulated

    @property
    def length(self) -> int:
        return len(self.observations)


@dataclass
class TrackSet:
    tracks: list  # [Track]
    min_track_length: int = 3

    @property
    def total_observations(self) -> int:
        return sum(t.length for t in self.tracks)


@dataclass
class PoseGraph:
    mst_edges: list  # [(i, j, weight)] with i < j
    relative_poses: dict = field(default_factory=dict)  # {(i, j): CameraPose T_ji}
    absolute_poses: dict = field(default_factory=dict)  # {image id: CameraPose T_cw}


# ---------------------------------------------------------------------------
# maximum spanning tree (Kruskal)
# ---------------------------------------------------------------------------


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, a: int) -> int:
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        self.parent[rb] = ra
        return True


def build_mst(g: MatchGraph) -> PoseGraph:
    """Maximum spanning tree over match counts; ties broken by (i, j)
    lexicographic order so the result is bit-stable."""
    edges = sorted(((i, j, w) for (i, j), w in g.weights.items() if w > 0),
                   key=lambda e: (-e[2], e[0], e[1]))
    uf = _UnionFind(g.num_images)
    picked = []
    for i, j, w in edges:
        if uf.union(i, j):
            picked.append((i, j, w))
    roots = {uf.find(i) for i in range(g.num_images)}
    if len(roots) > 1:
        comps: dict[int, list[int]] = {}
        for i in range(g.num_images):
            comps.setdefault(uf.find(i), []).append(i)
        raise ValueError(f"match graph is disconnected; components: {sorted(comps.values())}")
    return PoseGraph(mst_edges=picked)


# ---------------------------------------------------------------------------
# track extraction
# ---------------------------------------------------------------------------


def extract_tracks(g: MatchGraph, pg: PoseGraph, min_track_length: int = 3) -> TrackSet:
    """Union keypoints across MST-edge matches into global tracks.

    Components that would place two keypoints in the same image are
    inconsistent and dropped, as are components shorter than
    ``min_track_length``. Depth samples are carried over when the match graph
    has them.
    """
    node_ids: dict[tuple[int, int], int] = {}

    def node(img: int, kp: int) -> int:
        key = (img, kp)
        if key not in node_ids:
            node_ids[key] = len(node_ids)
        return node_ids[key]

    pairs = []
    for i, j, _ in pg.mst_edges:
        for ki, kj in g.matches[(i, j)]:
            pairs.append((node(i, int(ki)), node(j, int(kj))))
    uf = _UnionFind(len(node_ids))
    for a, b in pairs:
        uf.union(a, b)

    components: dict[int, list[tuple[int, int]]] = {}
    for key, nid in node_ids.items():
        components.setdefault(uf.find(nid), []).append(key)

    tracks = []
    for members in components.values():
        members.sort()
        images = [img for img, _ in members]
        if len(set(images)) != len(images):
            continue  # same image observed twice: inconsistent
        if len(members) < min_track_length:
            continue
        obs = []
        for img, kp in members:
            depth = float("nan")
            if g.keypoint_depths is not None:
                depth = float(g.keypoint_depths[img][kp])
            obs.append(Observation(image_id=img, pixel=g.keypoints[img][kp], depth=depth))
        tracks.append((members[0][0], members[0][1], obs))

    tracks.sort(key=lambda t: (t[0], t[1]))  # stable order: smallest (image, keypoint)
    return TrackSet(
        tracks=[Track(track_id=t_id, observations=obs) for t_id, (_, _, obs) in enumerate(tracks)],
        min_track_length=min_track_length,
    )


# ---------------------------------------------------------------------------
# depth lifting and relative poses
# ---------------------------------------------------------------------------


def lift(k: CameraIntrinsics, pixels: np.ndarray, depths: np.ndarray) -> np.ndarray:
    """Back-project pixels to camera space: d * K^-1 [p, 1]; (N, 2), (N,) -> (N, 3)."""
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    depths = np.atleast_1d(np.asarray(depths, dtype=np.float64))
    return np.stack(
        [
            depths * (pixels[:, 0] - k.cx) / k.fx,
            depths * (pixels[:, 1] - k.cy) / k.fy,
            depths,
        ],
        axis=1,
    )


def _edge_residual_grads(k, pose, px_i, px_j, d_i, huber_delta):
    """Loss and gradients for one edge's reprojection objective.

    Returns (loss, d_rot (3,), d_trans (3,), d_logf scalar). The focal
    gradient is with respect to a shared log-scale on both fx and fy.
    """
    r_mat = exp_so3(pose.rotation)
    x = lift(k, px_i, d_i)  # lifted points in camera i
    y = x @ r_mat.T + pose.translation  # in camera j
    z = y[:, 2]
    proj = np.stack([k.fx * y[:, 0] / z + k.cx, k.fy * y[:, 1] / z + k.cy], axis=1)
    r = proj - px_j
    norms = np.linalg.norm(r, axis=1)
    if huber_delta is None:
        loss = float(norms.sum())
        dnorm = np.ones_like(norms)
    else:
        small = norms <= huber_delta
        loss = float(np.sum(np.where(small, 0.5 * norms**2, huber_delta * (norms - 0.5 * huber_delta))))
        dnorm = np.where(small, norms, huber_delta)
    safe = np.maximum(norms, 1e-12)
    g = (dnorm / safe)[:, None] * r  # dloss/dproj, (N, 2)

    jac = projection_jacobians(k, y)  # (N, 2, 3)
    dy = np.einsum("nij,ni->nj", jac, g)  # dloss/dy, (N, 3)

    d_trans = dy.sum(axis=0)
    dr = d_exp_so3(pose.rotation)  # (3, 3, 3)
    d_rot = np.array([np.einsum("nj,jk,nk->", dy, dr[a], x) for a in range(3)])

    # focal: proj depends on f directly, and on y through the lift
    d_logf = float(
        np.sum(g[:, 0] * k.fx * y[:, 0] / z + g[:, 1] * k.fy * y[:, 1] / z)
    )
    dx = -np.concatenate([x[:, :2], np.zeros((x.shape[0], 1))], axis=1)  # dx/dlogf
    d_logf += float(np.einsum("nj,jk,nk->", dy, r_mat, dx))
    return loss, d_rot, d_trans, d_logf


def _horn_align(k, px_i, px_j, d_i, d_j) -> CameraPose | None:
    """Closed-form rigid alignment of the two depth-lifted clouds of an edge.

    Uses the depth samples of both images, which makes it far less sensitive
    to independent depth noise than minimizing the one-sided reprojection
    objective. Returns None when either side lacks usable depths.
    """
    if d_j is None or np.any(~np.isfinite(d_j)) or np.any(~np.isfinite(d_i)):
        return None
    xi = lift(k, px_i, d_i)
    xj = lift(k, px_j, d_j)
    mi, mj = xi.mean(axis=0), xj.mean(axis=0)
    cov = (xj - mj).T @ (xi - mi) / xi.shape[0]
    u, _, vt = np.linalg.svd(cov)
    s_mat = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s_mat[2, 2] = -1.0
    r = u @ s_mat @ vt
    return CameraPose.from_matrix(r, mj - r @ mi)


def _refine_edge_pose(k, theta, px_i, px_j, d_i, iters: int = 25) -> np.ndarray:
    """Levenberg-Marquardt polish of one edge's 6-vector (rotation, translation)
    against the stacked per-coordinate reprojection residuals."""
    lam = 1e-8
    x = lift(k, px_i, d_i)
    for _ in range(iters):
        pose = CameraPose(theta[:3], theta[3:])
        r_mat = exp_so3(pose.rotation)
        y = x @ r_mat.T + pose.translation
        z = y[:, 2]
        proj = np.stack([k.fx * y[:, 0] / z + k.cx, k.fy * y[:, 1] / z + k.cy], axis=1)
        res = (proj - px_j).reshape(-1)
        jac_pt = projection_jacobians(k, y)  # (M, 2, 3)
        dr = d_exp_so3(pose.rotation)  # (3, 3, 3)
        jac = np.empty((x.shape[0], 2, 6))
        jac[:, :, 3:] = jac_pt
        jac[:, :, :3] = np.einsum("mij,ajk,mk->mia", jac_pt, dr, x)
        jac = jac.reshape(-1, 6)
        jtj = jac.T @ jac
        jtr = jac.T @ res
        try:
            delta = np.linalg.solve(jtj + lam * np.eye(6), -jtr)
        except np.linalg.LinAlgError:
            lam *= 10
            continue
        new = theta + delta
        pose_n = CameraPose(new[:3], new[3:])
        y_n = x @ exp_so3(pose_n.rotation).T + pose_n.translation
        proj_n = np.stack(
            [k.fx * y_n[:, 0] / y_n[:, 2] + k.cx, k.fy * y_n[:, 1] / y_n[:, 2] + k.cy], axis=1
        )
        new_cost = float(np.sum((proj_n - px_j) ** 2))
        if new_cost <= float(np.sum(res**2)):
            theta = new
            lam = max(lam * 0.1, 1e-12)
            if np.linalg.norm(delta) < 1e-14:
                break
        else:
            lam *= 10
    return theta


def init_relative_poses(
    g: MatchGraph,
    pg: PoseGraph,
    k0: CameraIntrinsics,
    iterations: int = 100,
    optimize_focal: bool = True,
    huber_delta: float | None = None,
    lr_pose: float = 1e-2,
    lr_focal: float = 1e-3,
    record_history: bool = False,
):
    """Estimate T_ji for every MST edge and a shared focal scale.

    Each edge is seeded with the closed-form two-cloud alignment (exact on
    clean data); the depth-lifted reprojection objective is then optimized
    with Adam for a fixed iteration count to estimate the shared focal scale
    (in log-space). The returned edge poses are the closed-form seeds: the
    one-sided reprojection objective overfits independent depth-sample noise
    and its minimizer chains badly, so its role here is restricted to the
    intrinsics estimate (edges lacking a seed fall back to the optimized pose
    plus a Levenberg-Marquardt polish). Edges with fewer than
    ``MIN_EDGE_MATCHES`` correspondences keep an identity pose and are left
    out of the objective.

    Returns (intrinsics, {edge (i, j): camera-i -> camera-j transform}), plus
    the per-iteration objective values when ``record_history`` is set.
    """
    from .optim import Adam

    if g.keypoint_depths is None:
        raise ValueError("match graph carries no depth samples")

    edge_data = []
    poses = {}
    seeded = set()
    for i, j, _ in pg.mst_edges:
        m = g.matches[(i, j)]
        poses[(i, j)] = CameraPose.identity()
        if m.shape[0] < MIN_EDGE_MATCHES:
            log.warning("edge (%d, %d) has only %d matches; keeping identity pose", i, j, m.shape[0])
            continue
        px_i = g.keypoints[i][m[:, 0]]
        px_j = g.keypoints[j][m[:, 1]]
        d_i = np.asarray(g.keypoint_depths[i], dtype=np.float64)[m[:, 0]]
        d_j = np.asarray(g.keypoint_depths[j], dtype=np.float64)[m[:, 1]]
        edge_data.append(((i, j), px_i, px_j, d_i, d_j))

    params = {}
    for (i, j), px_i, px_j, d_i, d_j in edge_data:
        seed = _horn_align(k0, px_i, px_j, d_i, d_j)
        if seed is not None:
            seeded.add((i, j))
            poses[(i, j)] = seed.canonicalized()
        else:
            seed = CameraPose.identity()
        params[f"pose_{i}_{j}"] = np.concatenate([seed.rotation, seed.translation])
    params["logf"] = np.zeros(1)
    opt = Adam({name: (lr_focal if name == "logf" else lr_pose) for name in params})

    fx0, fy0 = k0.fx, k0.fy
    k = k0
    history = []
    for _ in range(iterations):
        grads = {name: np.zeros_like(p) for name, p in params.items()}
        scale = float(np.exp(params["logf"][0]))
        k = CameraIntrinsics(fx=fx0 * scale, fy=fy0 * scale, width=k0.width, height=k0.height)
        step_loss = 0.0
        for (i, j), px_i, px_j, d_i, _ in edge_data:
            p6 = params[f"pose_{i}_{j}"]
            pose = CameraPose(p6[:3], p6[3:])
            loss, d_rot, d_trans, d_logf = _edge_residual_grads(k, pose, px_i, px_j, d_i, huber_delta)
            step_loss += loss
            grads[f"pose_{i}_{j}"] = np.concatenate([d_rot, d_trans])
            if optimize_focal:
                grads["logf"][0] += d_logf
        opt.step(params, grads)
        history.append(step_loss)

    scale = float(np.exp(params["logf"][0]))
    k = CameraIntrinsics(fx=fx0 * scale, fy=fy0 * scale, width=k0.width, height=k0.height)
    for (i, j), px_i, px_j, d_i, _ in edge_data:
        if (i, j) in seeded:
            continue
        theta = _refine_edge_pose(k, params[f"pose_{i}_{j}"].copy(), px_i, px_j, d_i)
        poses[(i, j)] = CameraPose(theta[:3], theta[3:]).canonicalized()
    if record_history:
        return k, poses, history
    return k, poses


def edge_reprojection_loss(
    g: MatchGraph, pg: PoseGraph, k: CameraIntrinsics, huber_delta: float | None = None
) -> float:
    """Mean reprojection error (pixels per correspondence) over all MST edges
    at the pose graph's current relative poses."""
    total, count = 0.0, 0
    for i, j, _ in pg.mst_edges:
        m = g.matches[(i, j)]
        if m.shape[0] < MIN_EDGE_MATCHES:
            continue
        px_i = g.keypoints[i][m[:, 0]]
        px_j = g.keypoints[j][m[:, 1]]
        d_i = np.asarray(g.keypoint_depths[i], dtype=np.float64)[m[:, 0]]
        loss, *_ = _edge_residual_grads(k, pg.relative_poses[(i, j)], px_i, px_j, d_i, huber_delta)
        total += loss
        count += m.shape[0]
    return total / max(count, 1)


# ---------------------------------------------------------------------------
# pose chaining and track points
# ---------------------------------------------------------------------------


def best_root(g: MatchGraph) -> int:
    """Image with the largest total match weight (smallest id on ties)."""
    totals = np.zeros(g.num_images)
    for (i, j), w in g.weights.items():
        totals[i] += w
        totals[j] += w
    return int(np.argmax(totals))


def chain_poses(pg: PoseGraph, root: int) -> dict:
    """Absolute poses by composing relative poses along the spanning tree.

    The root camera is the world anchor (identity pose); each edge (i, j)
    stores the camera-i -> camera-j transform.
    """
    adj: dict[int, list[tuple[int, tuple[int, int], bool]]] = {}
    for i, j, _ in pg.mst_edges:
        adj.setdefault(i, []).append((j, (i, j), True))
        adj.setdefault(j, []).append((i, (i, j), False))

    absolute = {root: CameraPose.identity()}
    stack = [root]
    while stack:
        cur = stack.pop()
        for nxt, edge, forward in adj.get(cur, []):
            if nxt in absolute:
                continue
            rel = pg.relative_poses[edge]
            if forward:  # cur = i, nxt = j: T_cw,j = T_ji . T_cw,i
                absolute[nxt] = rel.compose(absolute[cur])
            else:  # cur = j, nxt = i: T_cw,i = T_ji^-1 . T_cw,j
                absolute[nxt] = rel.inverse().compose(absolute[cur])
            stack.append(nxt)
    pg.absolute_poses = absolute
    return absolute


def refine_global(
    ts: TrackSet,
    k: CameraIntrinsics,
    poses: dict,
    root: int,
    optimize_focal: bool = True,
    iterations: int = 15,
) -> tuple[CameraIntrinsics, dict, TrackSet]:
    """Joint Levenberg-Marquardt refinement of all chained poses, track
    points, and the shared focal scale against the track reprojection
    residuals.

    Chained per-edge poses inherit the full depth-sample error; the 2D track
    observations constrain the geometry far more tightly, so this global pass
    pulls the initialization into the basin the first-order training phase
    can actually refine. The root camera stays fixed (gauge anchor); the
    remaining gauge freedom (global scale) is left to the damping.
    """
    if any(t.point is None for t in ts.tracks):
        ts = init_track_points(ts, k, poses)
    cam_ids = sorted(poses.keys())
    free_cams = [c for c in cam_ids if c != root]
    cam_slot = {c: i for i, c in enumerate(free_cams)}
    n_pts = len(ts.tracks)
    n_cam_params = 6 * len(free_cams)
    n_params = n_cam_params + 3 * n_pts + (1 if optimize_focal else 0)

    theta = np.zeros(n_params)
    for c in free_cams:
        theta[6 * cam_slot[c] : 6 * cam_slot[c] + 3] = poses[c].rotation
        theta[6 * cam_slot[c] + 3 : 6 * cam_slot[c] + 6] = poses[c].translation
    pts0 = np.array([t.point for t in ts.tracks])
    theta[n_cam_params : n_cam_params + 3 * n_pts] = pts0.reshape(-1)
    root_pose = poses[root].copy()
    fx0, fy0 = k.fx, k.fy

    obs = []  # (cam id, point idx, pixel)
    for p_idx, tr in enumerate(ts.tracks):
        for o in tr.observations:
            obs.append((o.image_id, p_idx, o.pixel))

    def unpack(th):
        cams = {root: root_pose}
        for c in free_cams:
            base = 6 * cam_slot[c]
            cams[c] = CameraPose(th[base : base + 3], th[base + 3 : base + 6])
        pts = th[n_cam_params : n_cam_params + 3 * n_pts].reshape(-1, 3)
        scale = math.exp(th[-1]) if optimize_focal else 1.0
        k_cur = CameraIntrinsics(fx=fx0 * scale, fy=fy0 * scale, width=k.width, height=k.height)
        return cams, pts, k_cur

    def residuals_jac(th, want_jac: bool):
        cams, pts, k_cur = unpack(th)
        mats = {c: exp_so3(cams[c].rotation) for c in cam_ids}
        drs = {c: d_exp_so3(cams[c].rotation) for c in free_cams} if want_jac else {}
        res = np.empty(2 * len(obs))
        jac = np.zeros((2 * len(obs), n_params)) if want_jac else None
        for n, (c, p_idx, pixel) in enumerate(obs):
            p = pts[p_idx]
            y = mats[c] @ p + cams[c].translation
            z = y[2]
            proj = np.array([k_cur.fx * y[0] / z + k_cur.cx, k_cur.fy * y[1] / z + k_cur.cy])
            res[2 * n : 2 * n + 2] = proj - pixel
            if not want_jac:
                continue
            jp = np.array(
                [[k_cur.fx / z, 0.0, -k_cur.fx * y[0] / (z * z)],
                 [0.0, k_cur.fy / z, -k_cur.fy * y[1] / (z * z)]]
            )
            if c != root:
                base = 6 * cam_slot[c]
                for a in range(3):
                    jac[2 * n : 2 * n + 2, base + a] = jp @ (drs[c][a] @ p)
                jac[2 * n : 2 * n + 2, base + 3 : base + 6] = jp
            jac[2 * n : 2 * n + 2, n_cam_params + 3 * p_idx : n_cam_params + 3 * p_idx + 3] = (
                jp @ mats[c]
            )
            if optimize_focal:
                jac[2 * n, -1] = k_cur.fx * y[0] / z
                jac[2 * n + 1, -1] = k_cur.fy * y[1] / z
        return res, jac

    lam = 1e-6
    res, _ = residuals_jac(theta, False)
    cost = float(res @ res)
    for _ in range(iterations):
        res, jac = residuals_jac(theta, True)
        jtj = jac.T @ jac
        jtr = jac.T @ res
        stepped = False
        for _ in range(8):
            try:
                delta = np.linalg.solve(jtj + lam * np.diag(np.maximum(np.diag(jtj), 1e-12)), -jtr)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            res_new, _ = residuals_jac(theta + delta, False)
            new_cost = float(res_new @ res_new)
            if new_cost < cost:
                theta = theta + delta
                cost = new_cost
                lam = max(lam * 0.2, 1e-12)
                stepped = True
                break
            lam *= 10
        if not stepped:
            break

    cams, pts, k_out = unpack(theta)
    cams = {c: cams[c].canonicalized() for c in cam_ids}
    tracks_out = [
        Track(track_id=t.track_id, observations=t.observations, point=pts[i].copy())
        for i, t in enumerate(ts.tracks)
    ]
    return k_out, cams, TrackSet(tracks=tracks_out, min_track_length=ts.min_track_length)


def init_track_points(ts: TrackSet, k: CameraIntrinsics, poses: dict) -> TrackSet:
    """Triangulate each track as the centroid of its depth-lifted observations
    mapped to world space: P = mean_i( T_cw,i^-1 . lift(K, p_i, d_i) ).

    Observations with non-positive or missing depth are skipped; tracks whose
    observations are all unusable are dropped with a warning.
    """
    kept = []
    for tr in ts.tracks:
        pts = []
        for obs in tr.observations:
            if not np.isfinite(obs.depth) or obs.depth <= 0:
                continue
            x_cam = lift(k, obs.pixel[None, :], [obs.depth])[0]
            pose = poses[obs.image_id]
            r = pose.rotation_matrix()
            pts.append(r.T @ (x_cam - pose.translation))
        if not pts:
            log.warning("track %d dropped: no usable depth samples", tr.track_id)
            continue
        kept.append(Track(track_id=tr.track_id, observations=tr.observations,
                          point=np.mean(pts, axis=0)))
    return TrackSet(tracks=kept, min_track_length=ts.min_track_length)
