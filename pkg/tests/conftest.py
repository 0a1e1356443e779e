"""Shared fixtures and small geometry helpers for the test suite."""

import logging

import numpy as np
import pytest

from voxloc.geometry import CameraIntrinsics, Pose
from voxloc.pipeline import BuildConfig, build_voxel_map
from voxloc.synthetic import SceneSpec, gen_scene
from voxloc.trainer import TrainConfig

logging.getLogger("voxloc").setLevel(logging.ERROR)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform-ish random rotation via QR with a determinant fix."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q @ np.diag(np.sign(np.diag(r)))
    if np.linalg.det(q) < 0:
        q[:, 2] = -q[:, 2]
    return q


def random_pose(rng: np.random.Generator, translation_scale: float = 1.0) -> Pose:
    return Pose(random_rotation(rng), rng.standard_normal(3) * translation_scale)


def lookat(position, target=(0.0, 0.0, 0.0)) -> Pose:
    from voxloc.synthetic import lookat_pose

    return lookat_pose(position, target)


def rotation_error_rad(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Small-angle-accurate geodesic distance between rotations."""
    return float(np.linalg.norm(Ra.T @ Rb - np.eye(3)) / np.sqrt(2.0))


@pytest.fixture(scope="session")
def intr() -> CameraIntrinsics:
    return CameraIntrinsics(300.0, 300.0, 160.0, 120.0, 320, 240)


@pytest.fixture(scope="session")
def tiny_scene():
    """Small deterministic scene shared by pipeline-level tests."""
    spec = SceneSpec(landmark_count=20, frame_count=8, query_count=3,
                     channels=16, seed=1)
    return spec, gen_scene(spec)


@pytest.fixture(scope="session")
def tiny_trained(tiny_scene):
    """The tiny scene with a trained voxel map (reduced training budget)."""
    spec, gen = tiny_scene
    vmap = build_voxel_map(gen.train_views, gen.intrinsics,
                           BuildConfig(seed=spec.seed),
                           TrainConfig(epochs=120, rays_per_epoch=256,
                                       seed=spec.seed))
    return spec, gen, vmap
