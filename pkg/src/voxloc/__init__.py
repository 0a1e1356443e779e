"""Sparse per-landmark voxel grids rendering view-conditioned descriptors
for camera relocalization."""

from .descriptors import (
    DescriptorMap,
    Keypoint,
    Patch,
    SyntheticScene,
    crop_patch,
    similarity,
    synth_render_view,
)
from .estimator import VoxelFeatureLocalizer
from .geometry import CameraIntrinsics, Pose, Ray
from .mapstore import load_map, save_map
from .relocalizer import PoseEstimate, iterative_localize
from .renderer import render_patch, render_ray, render_visible
from .trainer import TrainConfig, train_voxel
from .tracking import Track, build_tracks, filter_tracks
from .triangulation import Landmark, dlt_triangulate, refine_landmark
from .voxel import VoxelLandmark, VoxelMap, create_voxel

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics",
    "DescriptorMap",
    "Keypoint",
    "Landmark",
    "Patch",
    "Pose",
    "PoseEstimate",
    "Ray",
    "SyntheticScene",
    "Track",
    "TrainConfig",
    "VoxelFeatureLocalizer",
    "VoxelLandmark",
    "VoxelMap",
    "build_tracks",
    "create_voxel",
    "crop_patch",
    "dlt_triangulate",
    "filter_tracks",
    "iterative_localize",
    "load_map",
    "refine_landmark",
    "render_patch",
    "render_ray",
    "render_visible",
    "save_map",
    "similarity",
    "synth_render_view",
    "train_voxel",
    "__version__",
]
