"""Hybrid dense monocular SLAM.

A sparse corner tracker initializes each frame's pose, a dense
frame-to-model alignment refines it against a surfel map built from
externally supplied metric depth, and loop closures deform the map
non-rigidly through an embedded deformation graph.
"""

from .camera import CameraIntrinsics, backproject, project
from .config import PipelineConfig, load_config
from .errors import MonofuseError
from .evaluate import PointCloud, Trajectory, eval_ate, eval_surface, eval_trel
from .frame import Frame, Pyramid, build_pyramid, compute_normals
from .pipeline import FrameReport, Pipeline, RunResult
from .se3 import RigidTransform, se3_exp, se3_log
from .surfels import ModelView, Surfel, SurfelMap

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics",
    "Frame",
    "FrameReport",
    "ModelView",
    "MonofuseError",
    "Pipeline",
    "PipelineConfig",
    "PointCloud",
    "Pyramid",
    "RigidTransform",
    "RunResult",
    "Surfel",
    "SurfelMap",
    "Trajectory",
    "backproject",
    "build_pyramid",
    "compute_normals",
    "eval_ate",
    "eval_surface",
    "eval_trel",
    "load_config",
    "project",
    "se3_exp",
    "se3_log",
    "__version__",
]
