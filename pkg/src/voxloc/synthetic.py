"""Synthetic scene and trajectory generation for desk-scale evaluation.

Cameras orbit the scene center at a fixed radius, always looking at it.
Training views are spread evenly over the angular range; query views sit
beyond both ends of the range, offset in steps of ``query_offset_deg`` so
that every query is at least that far from the nearest training view.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .descriptors import (
    DescriptorMap,
    Keypoint,
    SyntheticScene,
    synth_render_view,
    visible_landmark_indices,
)
from .geometry import CameraIntrinsics, Pose


@dataclass
class SceneSpec:
    landmark_count: int = 120
    scene_extent: float = 1.0  # meters, cube side holding the landmarks
    orbit_radius: float = 4.0
    angular_range_deg: float = 60.0
    frame_count: int = 20
    query_count: int = 10
    query_offset_deg: float = 5.0
    pixel_noise: float = 0.0  # keypoint position sigma, pixels
    view_dependence: float = 0.05
    outlier_rate: float = 0.0  # fraction of keypoints moved to random pixels
    falloff_sigma: float = 2.5
    channels: int = 32
    image_width: int = 320
    image_height: int = 240
    focal: float = 300.0
    seed: int = 0

    def __post_init__(self):
        if self.frame_count < 2:
            raise ValueError("frame_count must be at least 2")
        if self.scene_extent <= 0:
            raise ValueError("scene_extent must be positive")

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.focal, self.focal,
                                self.image_width / 2.0, self.image_height / 2.0,
                                self.image_width, self.image_height)


@dataclass
class View:
    """One posed view: the oracle's dense descriptor map plus its keypoints.

    ``landmark_ids`` records which scene landmark produced each keypoint,
    metadata used only by tests and oracle-based checks (never persisted).
    """

    pose: Pose
    keypoints: list[Keypoint]
    descriptor_map: DescriptorMap
    landmark_ids: np.ndarray = field(default=None, repr=False)


@dataclass
class GeneratedScene:
    scene: SyntheticScene
    intrinsics: CameraIntrinsics
    train_views: list[View]
    query_views: list[View]
    train_angles_deg: np.ndarray
    query_angles_deg: np.ndarray


def lookat_pose(position, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)) -> Pose:
    """Camera-to-world pose at ``position`` with the optical axis on ``target``."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward = forward / np.linalg.norm(forward)
    x = np.cross(np.asarray(up, dtype=np.float64), forward)
    n = np.linalg.norm(x)
    if n < 1e-12:  # looking straight along up: pick any perpendicular
        x = np.cross(np.array([1.0, 0.0, 0.0]), forward)
        n = np.linalg.norm(x)
    x = x / n
    y = np.cross(forward, x)
    return Pose(np.stack([x, y, forward], axis=1), position)


def orbit_pose(spec: SceneSpec, angle_deg: float) -> Pose:
    """Pose on the orbit circle (x-z plane) looking at the scene center."""
    a = np.radians(angle_deg)
    position = spec.orbit_radius * np.array([np.sin(a), 0.0, -np.cos(a)])
    return lookat_pose(position)


def train_angles(spec: SceneSpec) -> np.ndarray:
    half = spec.angular_range_deg / 2.0
    return np.linspace(-half, half, spec.frame_count)


def query_angles(spec: SceneSpec) -> np.ndarray:
    """Angles beyond both ends of the training range, alternating sides."""
    half = spec.angular_range_deg / 2.0
    out = []
    k = 1
    while len(out) < spec.query_count:
        out.append(half + k * spec.query_offset_deg)
        if len(out) < spec.query_count:
            out.append(-half - k * spec.query_offset_deg)
        k += 1
    return np.array(out)


def _corrupt_keypoints(keypoints: list[Keypoint], ids: np.ndarray,
                       spec: SceneSpec, view_tag: int,
                       index: int) -> list[Keypoint]:
    if spec.pixel_noise == 0.0 and spec.outlier_rate == 0.0:
        return keypoints
    rng = np.random.default_rng([int(spec.seed), 0xAD0, view_tag, index])
    out = []
    for kp in keypoints:
        p = kp.position.copy()
        if spec.pixel_noise > 0:
            p = p + rng.normal(0.0, spec.pixel_noise, 2)
        if spec.outlier_rate > 0 and rng.uniform() < spec.outlier_rate:
            p = rng.uniform([0.0, 0.0], [spec.image_width - 1.0,
                                         spec.image_height - 1.0])
        out.append(Keypoint(np.clip(p, [0, 0], [spec.image_width - 1,
                                                spec.image_height - 1]),
                            kp.score))
    return out


def _render_views(scene: SyntheticScene, intr: CameraIntrinsics,
                  angles: np.ndarray, spec: SceneSpec,
                  view_tag: int) -> list[View]:
    views = []
    for i, angle in enumerate(angles):
        pose = orbit_pose(spec, angle)
        dmap, kps = synth_render_view(scene, pose, intr)
        ids = visible_landmark_indices(scene, pose, intr)
        kps = _corrupt_keypoints(kps, ids, spec, view_tag, i)
        views.append(View(pose=pose, keypoints=kps, descriptor_map=dmap,
                          landmark_ids=ids))
    return views


def gen_scene(spec: SceneSpec) -> GeneratedScene:
    """Deterministic scene plus posed training and query views."""
    intr = spec.intrinsics()
    scene = SyntheticScene.random(
        spec.landmark_count, spec.scene_extent, spec.channels, spec.seed,
        view_dependence=spec.view_dependence, falloff_sigma=spec.falloff_sigma)
    ta = train_angles(spec)
    qa = query_angles(spec)
    return GeneratedScene(
        scene=scene,
        intrinsics=intr,
        train_views=_render_views(scene, intr, ta, spec, view_tag=1),
        query_views=_render_views(scene, intr, qa, spec, view_tag=2),
        train_angles_deg=ta,
        query_angles_deg=qa,
    )
