"""splatcal: self-calibrating 3D Gaussian splatting.

Jointly optimizes camera focal length, camera poses, and a Gaussian scene
from images plus feature correspondences, with analytic gradients for all
camera parameters and a track-based initialization pipeline.
"""

from .geometry import (
    CameraIntrinsics,
    CameraPose,
    RenderSettings,
    intrinsics_from_fov,
    fov_of,
)
from .scene import Gaussian, SceneModel, build_covariance, init_track_gaussians
from .rasterizer import (
    GradientBundle,
    RenderOutput,
    render,
    render_backward,
    render_tracked_projections,
)

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics",
    "CameraPose",
    "RenderSettings",
    "intrinsics_from_fov",
    "fov_of",
    "Gaussian",
    "SceneModel",
    "build_covariance",
    "init_track_gaussians",
    "GradientBundle",
    "RenderOutput",
    "render",
    "render_backward",
    "render_tracked_projections",
    "__version__",
]
