"""Two-phase joint optimization of the scene, camera poses, and focal length.

Warmup refines the tracked Gaussians, all poses, and (after its frozen
window) the focal length against photometric + track losses, every step
covering every view, with no densification. Joint training then clones the
tracked Gaussians into an initial untracked population and runs per-view
Gaussian updates with adaptive densification, while camera gradients
accumulate across each shuffled epoch and are applied in one bundle-
adjustment-style step at the epoch boundary.

Focal length is optimized in log-space (the analytic gradients stay in pixel
units and are chained by fx, fy), which makes the learning-rate schedule
scale-free in the image resolution.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import TrainingDiverged
from .geometry import CameraIntrinsics, CameraPose, RenderSettings, canonicalize_axis_angle
from .losses import (
    LossWeights,
    photometric_loss_and_grad,
    scale_loss_and_grad,
    total_loss,
    track_loss_and_grads,
)
from .optim import Adam, ExponentialDecay, focal_lr
from .rasterizer import (
    render,
    render_backward,
    render_tracked_projections,
    tracked_projection_backward,
)
from .scene import SceneModel, quat_normalize
from .seeds import substream
from .tracks import TrackSet

__all__ = ["DensifyConfig", "Schedules", "Trainer", "densify_and_prune"]

GAUSS_GROUPS = ("means", "quats", "log_scales", "colors", "opacity_logits")


@dataclass
class DensifyConfig:
    """Adaptive-control thresholds; tracked Gaussians are exempt from pruning
    and splitting (clone-only)."""

    grad_threshold: float = 8e-5  # mean screen-space positional gradient norm
    opacity_floor: float = 5e-3
    split_size: float = 0.01  # x bounding_radius: clone at/below, split above
    prune_size: float = 0.2  # x bounding_radius: prune untracked above
    interval: int = 2  # epochs between densification passes
    split_scale_divisor: float = 1.6
    until_epoch: int = 60  # no densification after this epoch

    def __post_init__(self):
        for name in ("grad_threshold", "opacity_floor", "split_size", "prune_size",
                     "interval", "split_scale_divisor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class Schedules:
    """Per-group learning rates as deterministic functions of each group's
    own step counter."""

    xyz_scale: float = 1.0
    lr_means_base: float = 1.6e-2  # multiplied by xyz_scale
    lr_quats: float = 1e-3
    lr_scales: float = 5e-3
    lr_opacity: float = 5e-2
    lr_colors: float = 2.5e-3
    lr_rotation_base: float = 5e-3
    lr_translation_base: float = 1e-2
    half_life: float = 250.0
    focal_base: float = 5e-3
    focal_floor: float = 1e-4
    focal_frozen_steps: int = 100
    focal_span: int = 500

    def __post_init__(self):
        self._means = ExponentialDecay(self.lr_means_base * self.xyz_scale, self.half_life)
        self._rot = ExponentialDecay(self.lr_rotation_base, self.half_life)
        self._trans = ExponentialDecay(self.lr_translation_base, self.half_life)

    def lr_means(self, step: int) -> float:
        return self._means(step)

    def lr_rotation(self, step: int) -> float:
        return self._rot(step)

    def lr_translation(self, step: int) -> float:
        return self._trans(step)

    def lr_focal(self, step: int) -> float:
        return focal_lr(step, self.focal_base, self.focal_floor,
                        self.focal_frozen_steps, self.focal_span)


class Trainer:
    """Owns the scene, camera parameters, and optimizer state for a run.

    The trainer is the sole mutator of the scene and cameras. Views are keyed
    by integer ids (test views are simply absent). ``threads`` > 1 only
    parallelizes the read-only per-view render/backward passes of warmup;
    results are merged in view order, so outputs are identical to the
    sequential path.
    """

    def __init__(
        self,
        scene: SceneModel,
        poses: dict,
        k: CameraIntrinsics,
        tracks: TrackSet,
        images: dict,
        settings: RenderSettings | None = None,
        schedules: Schedules | None = None,
        densify: DensifyConfig | None = None,
        warmup_weights: LossWeights | None = None,
        joint_weights: LossWeights | None = None,
        seed: int = 0,
        threads: int = 1,
        divergence_factor: float = 10.0,
    ):
        self.scene = scene
        self.k = k
        self.tracks = tracks
        self.images = images
        self.settings = settings or RenderSettings()
        self.schedules = schedules or Schedules(xyz_scale=scene.bounding_radius)
        self.densify_cfg = densify or DensifyConfig()
        self.warmup_weights = warmup_weights or LossWeights.warmup()
        self.joint_weights = joint_weights or LossWeights.joint()
        self.threads = max(1, threads)
        self.divergence_factor = divergence_factor

        self.view_ids = sorted(images.keys())
        self._row = {v: i for i, v in enumerate(self.view_ids)}
        self.cam_rot = np.stack([poses[v].rotation for v in self.view_ids])
        self.cam_trans = np.stack([poses[v].translation for v in self.view_ids])
        self.log_f = np.log([k.fx, k.fy])

        self.opt_gauss = Adam({g: 0.0 for g in GAUSS_GROUPS})
        self.opt_cam = Adam({"rot": 0.0, "trans": 0.0, "logf": 0.0})
        self.mu_step = 0  # gaussian-group schedule counter
        self.cam_step = 0  # camera-group schedule counter
        self.warmup_step = 0

        self._shuffle_rng = substream(seed, "shuffle")
        self._densify_rng = substream(seed, "densify")
        self.records: list[dict] = []

    # -- parameter plumbing -------------------------------------------------

    def pose(self, view: int) -> CameraPose:
        i = self._row[view]
        return CameraPose(self.cam_rot[i], self.cam_trans[i])

    def poses(self) -> dict:
        return {v: self.pose(v) for v in self.view_ids}

    def _sync_k(self) -> None:
        self.k = self.k.with_focal(float(np.exp(self.log_f[0])), float(np.exp(self.log_f[1])))

    def _gauss_params(self) -> dict:
        return {
            "means": self.scene.means,
            "quats": self.scene.quats,
            "log_scales": self.scene.log_scales,
            "colors": self.scene.colors,
            "opacity_logits": self.scene.opacity_logits,
        }

    def _set_gauss_lrs(self) -> None:
        s = self.schedules
        self.opt_gauss.learning_rates.update(
            means=s.lr_means(self.mu_step), quats=s.lr_quats, log_scales=s.lr_scales,
            colors=s.lr_colors, opacity_logits=s.lr_opacity,
        )

    def _view_pass(self, view: int, weights: LossWeights, track_grads: dict):
        """Render one view and back-propagate its photometric + track losses.

        Returns (bundle, l1, dssim). ``track_grads`` carries the upstream
        gradients for this view's tracked projections, already weighted.
        """
        pose = self.pose(view)
        out = render(self.scene, pose, self.k, self.settings)
        l1, dval, dimg = photometric_loss_and_grad(out.image, self.images[view], weights)
        bundle = render_backward(out, dimg, self.scene, pose, self.k)
        if track_grads:
            bundle.add_(tracked_projection_backward(self.scene, pose, self.k,
                                                    track_grads, self.settings))
        return bundle, l1, dval

    def _all_projections(self) -> dict:
        return {
            v: render_tracked_projections(self.scene, self.pose(v), self.k, self.settings)[0]
            for v in self.view_ids
        }

    # -- warmup -------------------------------------------------------------

    def warmup(self, steps: int = 500) -> dict:
        """Global refinement: every step renders every view, sums the
        gradients, and applies one update to the tracked Gaussians, all
        poses, and (after the frozen window) the focal length."""
        initial_total = None
        for _ in range(steps):
            w = self.warmup_weights
            track_val, tgrads, _ = track_loss_and_grads(self.tracks, self._all_projections())
            scaled = {
                v: {tid: w.lambda_track * g for tid, g in per.items()}
                for v, per in tgrads.items()
            } if w.lambda_track > 0 else {}

            def one_view(v):
                return self._view_pass(v, w, scaled.get(v, {}))

            if self.threads > 1:
                with ThreadPoolExecutor(max_workers=self.threads) as pool:
                    results = list(pool.map(one_view, self.view_ids))
            else:
                results = [one_view(v) for v in self.view_ids]

            gauss_grads = {g: None for g in GAUSS_GROUPS}
            rot_grads = np.zeros_like(self.cam_rot)
            trans_grads = np.zeros_like(self.cam_trans)
            dlogf = np.zeros(2)
            l1_sum = dssim_sum = 0.0
            for v, (bundle, l1, dval) in zip(self.view_ids, results):
                i = self._row[v]
                rot_grads[i] = bundle.d_rotation
                trans_grads[i] = bundle.d_translation
                dlogf += (bundle.dfx * self.k.fx, bundle.dfy * self.k.fy)
                l1_sum += l1
                dssim_sum += dval
                for g, arr in zip(GAUSS_GROUPS, (bundle.d_means, bundle.d_quats,
                                                 bundle.d_log_scales, bundle.d_colors,
                                                 bundle.d_opacity_logits)):
                    gauss_grads[g] = arr if gauss_grads[g] is None else gauss_grads[g] + arr

            step_total = total_loss(l1_sum, dssim_sum, track_val, 0.0, w)
            if initial_total is None:
                initial_total = step_total
            self._check_divergence(step_total, initial_total, phase="warmup")

            self._set_gauss_lrs()
            self.opt_gauss.step(self._gauss_params(), gauss_grads)
            self.scene.quats[:] = quat_normalize(self.scene.quats)
            self.mu_step += 1

            lr_f = self.schedules.lr_focal(self.warmup_step)
            self.opt_cam.learning_rates.update(
                rot=self.schedules.lr_rotation(self.cam_step),
                trans=self.schedules.lr_translation(self.cam_step),
                logf=lr_f,
            )
            cam_grads = {"rot": rot_grads, "trans": trans_grads}
            if lr_f > 0:
                cam_grads["logf"] = dlogf
            self.opt_cam.step({"rot": self.cam_rot, "trans": self.cam_trans,
                               "logf": self.log_f}, cam_grads)
            for i in range(self.cam_rot.shape[0]):
                self.cam_rot[i] = canonicalize_axis_angle(self.cam_rot[i])
            self.cam_step += 1
            self._sync_k()

            self.records.append({
                "phase": "warmup", "step": self.warmup_step, "l1": l1_sum,
                "dssim": dssim_sum, "track": track_val, "scale": 0.0,
                "total": step_total, "lr_means": self.opt_gauss.learning_rates["means"],
                "lr_rotation": self.opt_cam.learning_rates["rot"],
                "lr_translation": self.opt_cam.learning_rates["trans"],
                "lr_focal": lr_f, "fx": self.k.fx, "fy": self.k.fy,
            })
            self.warmup_step += 1
        return self.records[-1] if self.records else {}

    # -- joint phase ----------------------------------------------------------

    def clone_tracked(self) -> None:
        """Seed the untracked population by cloning every tracked Gaussian."""
        rows = np.nonzero(self.scene.tracked)[0]
        self.scene.append(
            self.scene.means[rows].copy(), self.scene.quats[rows].copy(),
            self.scene.log_scales[rows].copy(), self.scene.colors[rows].copy(),
            self.scene.opacity_logits[rows].copy(), np.zeros(rows.size, dtype=bool),
        )
        for g in GAUSS_GROUPS:
            self.opt_gauss.ensure_rows(g, self.scene.n)

    def joint_train(self, epochs: int = 30, checkpoint_cb=None) -> dict:
        """Shuffled per-view Gaussian updates with one camera/focal update per
        epoch and periodic densification (tracked Gaussians preserved)."""
        if not np.any(~self.scene.tracked):
            self.clone_tracked()
        w = self.joint_weights
        n_views = len(self.view_ids)
        initial_total = None
        grad_norm_accum = np.zeros(self.scene.n)
        grad_seen = np.zeros(self.scene.n)

        for epoch in range(epochs):
            self.mu_step = self.warmup_step + epoch
            order = [self.view_ids[i] for i in self._shuffle_rng.permutation(n_views)]
            rot_grads = np.zeros_like(self.cam_rot)
            trans_grads = np.zeros_like(self.cam_trans)
            dlogf = np.zeros(2)
            epoch_losses = np.zeros(4)  # l1, dssim, track, scale

            for v in order:
                pose = self.pose(v)
                projections = {v: render_tracked_projections(self.scene, pose, self.k,
                                                             self.settings)[0]}
                track_val, tgrads, _ = track_loss_and_grads(self.tracks, projections)
                scaled = {tid: w.lambda_track * g for tid, g in tgrads.get(v, {}).items()}
                bundle, l1, dval = self._view_pass(v, w, scaled)
                scale_val, scale_grad = scale_loss_and_grad(self.scene)
                bundle.d_log_scales += w.lambda_scale * scale_grad

                step_total = total_loss(l1, dval, track_val, scale_val, w)
                if initial_total is None:
                    initial_total = step_total
                self._check_divergence(step_total, initial_total, phase="joint")
                epoch_losses += (l1, dval, track_val, scale_val)

                self._set_gauss_lrs()
                self.opt_gauss.step(self._gauss_params(), {
                    "means": bundle.d_means, "quats": bundle.d_quats,
                    "log_scales": bundle.d_log_scales, "colors": bundle.d_colors,
                    "opacity_logits": bundle.d_opacity_logits,
                })
                self.scene.quats[:] = quat_normalize(self.scene.quats)

                i = self._row[v]
                rot_grads[i] += bundle.d_rotation
                trans_grads[i] += bundle.d_translation
                dlogf += (bundle.dfx * self.k.fx, bundle.dfy * self.k.fy)
                grad_norm_accum += bundle.d_mu2d_norm
                grad_seen += bundle.d_mu2d_norm > 0

            # bundle-adjustment-style camera update at the epoch boundary
            self.opt_cam.learning_rates.update(
                rot=self.schedules.lr_rotation(self.cam_step),
                trans=self.schedules.lr_translation(self.cam_step),
                logf=self.schedules.lr_focal(self.warmup_step + epoch),
            )
            self.opt_cam.step({"rot": self.cam_rot, "trans": self.cam_trans,
                               "logf": self.log_f},
                              {"rot": rot_grads, "trans": trans_grads, "logf": dlogf})
            for i in range(self.cam_rot.shape[0]):
                self.cam_rot[i] = canonicalize_axis_angle(self.cam_rot[i])
            self.cam_step += 1
            self._sync_k()

            if (
                (epoch + 1) % self.densify_cfg.interval == 0
                and epoch + 1 <= self.densify_cfg.until_epoch
            ):
                mean_norm = np.where(grad_seen > 0, grad_norm_accum / np.maximum(grad_seen, 1), 0.0)
                densify_and_prune(self.scene, mean_norm, self.opt_gauss,
                                  self.densify_cfg, self._densify_rng)
                grad_norm_accum = np.zeros(self.scene.n)
                grad_seen = np.zeros(self.scene.n)
            elif grad_norm_accum.shape[0] != self.scene.n:
                grad_norm_accum = np.zeros(self.scene.n)
                grad_seen = np.zeros(self.scene.n)

            self.records.append({
                "phase": "joint", "epoch": epoch, "l1": epoch_losses[0] / n_views,
                "dssim": epoch_losses[1] / n_views, "track": epoch_losses[2] / n_views,
                "scale": epoch_losses[3] / n_views,
                "total": float(np.dot(epoch_losses / n_views,
                               (w.lambda1, w.lambda_dssim, w.lambda_track, w.lambda_scale))),
                "n_gaussians": self.scene.n, "fx": self.k.fx, "fy": self.k.fy,
                "lr_means": self.opt_gauss.learning_rates["means"],
                "lr_rotation": self.opt_cam.learning_rates["rot"],
                "lr_translation": self.opt_cam.learning_rates["trans"],
                "lr_focal": self.opt_cam.learning_rates["logf"],
            })
            if checkpoint_cb is not None:
                checkpoint_cb(epoch, self)
        return self.records[-1] if self.records else {}

    def _check_divergence(self, value: float, initial: float, phase: str) -> None:
        if not math.isfinite(value) or (initial > 0 and value > self.divergence_factor * initial):
            raise TrainingDiverged({
                "phase": phase, "loss": value, "initial": initial,
                "factor": self.divergence_factor, "fx": self.k.fx, "fy": self.k.fy,
                "n_gaussians": self.scene.n,
            })


def densify_and_prune(
    scene: SceneModel,
    mean_grad_norms: np.ndarray,
    opt: Adam,
    cfg: DensifyConfig,
    rng: np.random.Generator,
) -> dict:
    """Clone/split Gaussians with large accumulated positional gradients and
    prune faint or oversized untracked ones.

    Tracked Gaussians are never removed and never split; cloning one yields
    an untracked copy, which keeps the track index a bijection. Split
    children sample their centers from the parent and shrink its scales.
    """
    n0 = scene.n
    scales = scene.scales()
    max_scale = scales.max(axis=1)
    big = max_scale > cfg.split_size * scene.bounding_radius
    hot = np.asarray(mean_grad_norms) > cfg.grad_threshold

    clone_rows = np.nonzero(hot & (~big | scene.tracked))[0]
    split_rows = np.nonzero(hot & big & ~scene.tracked)[0]

    new = {"means": [], "quats": [], "log_scales": [], "colors": [], "opacity_logits": []}
    for r in clone_rows:
        new["means"].append(scene.means[r].copy())
        new["quats"].append(scene.quats[r].copy())
        new["log_scales"].append(scene.log_scales[r].copy())
        new["colors"].append(scene.colors[r].copy())
        new["opacity_logits"].append(scene.opacity_logits[r])
    covs = scene.covariances() if split_rows.size else None
    for r in split_rows:
        chol = np.linalg.cholesky(covs[r] + 1e-12 * np.eye(3))
        for _ in range(2):
            new["means"].append(scene.means[r] + chol @ rng.normal(size=3))
            new["quats"].append(scene.quats[r].copy())
            new["log_scales"].append(scene.log_scales[r] - math.log(cfg.split_scale_divisor))
            new["colors"].append(scene.colors[r].copy())
            new["opacity_logits"].append(scene.opacity_logits[r])

    remove = np.zeros(scene.n, dtype=bool)
    remove[split_rows] = True  # parents replaced by their two children
    faint = scene.opacities() < cfg.opacity_floor
    oversized = max_scale > cfg.prune_size * scene.bounding_radius
    remove |= (faint | oversized) & ~scene.tracked

    if np.any(remove):
        scene.remove(remove)
        for g in GAUSS_GROUPS:
            opt.keep_rows(g, ~remove)
    if new["means"]:
        scene.append(
            np.array(new["means"]), np.array(new["quats"]), np.array(new["log_scales"]),
            np.array(new["colors"]), np.array(new["opacity_logits"]),
            np.zeros(len(new["means"]), dtype=bool),
        )
    for g in GAUSS_GROUPS:
        opt.ensure_rows(g, scene.n)
    return {
        "cloned": int(clone_rows.size), "split": int(split_rows.size),
        "pruned": int(np.sum(remove) - split_rows.size), "before": n0, "after": scene.n,
    }
