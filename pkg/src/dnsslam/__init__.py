"""Semantically decomposed neural implicit RGB-D SLAM."""

__version__ = "0.1.0"

from .data import Dataset, Frame, default_intrinsics, default_scene, generate_frames, load_dataset, toy_orbit
from .eval import ate_rmse, depth_l1, extract_mesh, miou, umeyama_align
from .field import FieldConfig, SceneField
from .geometry import Intrinsics, Pose
from .loss import LossWeights
from .slam import Slam, SlamConfig, run_slam

__all__ = [
    "Dataset", "Frame", "FieldConfig", "Intrinsics", "LossWeights", "Pose", "SceneField", "Slam", "SlamConfig",
    "ate_rmse", "default_intrinsics", "default_scene", "depth_l1", "extract_mesh", "generate_frames",
    "load_dataset", "miou", "run_slam", "toy_orbit", "umeyama_align",
]
