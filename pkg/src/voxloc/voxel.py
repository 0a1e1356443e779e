"""Per-landmark voxel grids: sizing, node lattices, trilinear sampling.

A voxel is an axis-aligned cube centered on a landmark. Node (a, b, c) of
an R x R x R lattice sits at ``center + ((a, b, c)/(R-1) - 1/2) * side``;
descriptor nodes carry C channels, density nodes a single raw value that
is passed through a shifted softplus at sample time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .exceptions import OutOfBounds
from .geometry import CameraIntrinsics

_BOUNDS_SLACK = 1e-9


@dataclass
class VoxelLandmark:
    """Trainable unit: descriptor and raw-density lattices around one landmark."""

    center: np.ndarray  # (3,) meters
    side: float
    resolution: int
    desc_nodes: np.ndarray  # (R, R, R, C)
    density_nodes: np.ndarray  # (R, R, R) raw, pre-activation
    track_id: int

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.desc_nodes = np.asarray(self.desc_nodes, dtype=np.float64)
        self.density_nodes = np.asarray(self.density_nodes, dtype=np.float64)
        R = self.resolution
        if self.side <= 0:
            raise ValueError("voxel side must be positive")
        if R < 2:
            raise ValueError("lattice resolution must be at least 2")
        if self.desc_nodes.shape[:3] != (R, R, R) or self.density_nodes.shape != (R, R, R):
            raise ValueError("lattice shapes do not match the resolution")
        if not (np.all(np.isfinite(self.desc_nodes))
                and np.all(np.isfinite(self.density_nodes))):
            raise ValueError("lattice values must be finite")

    @property
    def channels(self) -> int:
        return self.desc_nodes.shape[3]


@dataclass
class VoxelMap:
    """The scene: trained voxels plus shared camera intrinsics and metadata."""

    voxels: list[VoxelLandmark]
    intrinsics: CameraIntrinsics
    channels: int
    patch_size: int
    extractor: str = "synthetic"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for v in self.voxels:
            if v.channels != self.channels:
                raise ValueError("voxel channel counts must be uniform")


def density_activation(raw, shift: float = 0.0):
    """Shifted softplus mapping raw lattice values to non-negative densities."""
    return np.logaddexp(0.0, np.asarray(raw, dtype=np.float64) + shift)


def inverse_density_activation(sigma: float, shift: float = 0.0) -> float:
    """Raw value whose activation equals the given positive density."""
    if sigma <= 0:
        raise ValueError("density must be positive")
    # log(expm1(sigma)), written to stay stable for large sigma
    return float(sigma + np.log1p(-np.exp(-sigma)) - shift)


def voxel_size(track, landmark: np.ndarray, patch_size: int, focal: float) -> float:
    """Physical cube side: the minimum over observations of S * l / f.

    ``l`` is the camera-center-to-landmark distance of each observation, so
    the cube subtends at most ``patch_size`` pixels in every training view.
    """
    if focal <= 0:
        raise ValueError("focal length must be positive")
    if not track.observations:
        raise ValueError("track has no observations")
    landmark = np.asarray(landmark, dtype=np.float64).reshape(3)
    dists = [np.linalg.norm(obs.pose.camera_center - landmark)
             for obs in track.observations]
    return float(patch_size * min(dists) / focal)


def node_positions(center: np.ndarray, side: float, resolution: int) -> np.ndarray:
    """World positions of all lattice nodes, shape (R, R, R, 3)."""
    ax = (np.arange(resolution) / (resolution - 1) - 0.5) * side
    gx, gy, gz = np.meshgrid(ax, ax, ax, indexing="ij")
    return np.stack([gx, gy, gz], axis=3) + np.asarray(center, dtype=np.float64)


def trilinear_weights(center, side: float, resolution: int,
                      points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Trilinear support of each point: flat node indices and blend weights.

    Returns (indices (M, 8) int, weights (M, 8)); weights of the 8 lattice
    nodes surrounding each point sum to 1. Points may sit on faces within a
    1e-9 slack; anything farther outside raises OutOfBounds.
    """
    R = resolution
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    c = np.asarray(center, dtype=np.float64).reshape(3)
    off = p - c
    if np.any(np.abs(off) > side / 2.0 + _BOUNDS_SLACK):
        worst = float(np.max(np.abs(off)))
        raise OutOfBounds(f"point offset {worst:.6g} exceeds half-side {side / 2.0:.6g}")
    g = np.clip((off / side + 0.5) * (R - 1), 0.0, R - 1)
    i0 = np.minimum(np.floor(g).astype(np.int64), R - 2)
    f = g - i0

    corners = np.array([[a, b, cbit] for a in (0, 1) for b in (0, 1)
                        for cbit in (0, 1)], dtype=np.int64)  # (8, 3)
    idx3 = i0[:, None, :] + corners[None, :, :]  # (M, 8, 3)
    flat = (idx3[:, :, 0] * R + idx3[:, :, 1]) * R + idx3[:, :, 2]
    w = np.ones((len(p), 8))
    for axis in range(3):
        fa = f[:, axis][:, None]
        w = w * np.where(corners[None, :, axis] == 1, fa, 1.0 - fa)
    return flat, w


def trilinear_sample(nodes: np.ndarray, center, side: float, point) -> np.ndarray:
    """Trilinear blend of the 8 nodes surrounding a single point.

    ``nodes`` is an (R, R, R, K) lattice; an (R, R, R) lattice is treated as
    K = 1 and returns a scalar.
    """
    scalar = nodes.ndim == 3
    lattice = nodes[..., None] if scalar else nodes
    R = lattice.shape[0]
    idx, w = trilinear_weights(center, side, R, np.asarray(point).reshape(1, 3))
    flat = lattice.reshape(R * R * R, -1)
    out = (w[0][:, None] * flat[idx[0]]).sum(axis=0)
    return float(out[0]) if scalar else out


def trilinear_sample_many(nodes: np.ndarray, center, side: float,
                          points: np.ndarray) -> np.ndarray:
    """Vectorized trilinear sampling at (M, 3) points; returns (M, K) or (M,)."""
    scalar = nodes.ndim == 3
    lattice = nodes[..., None] if scalar else nodes
    R = lattice.shape[0]
    idx, w = trilinear_weights(center, side, R, points)
    flat = lattice.reshape(R * R * R, -1)
    out = np.einsum("mk,mkc->mc", w, flat[idx])
    return out[:, 0] if scalar else out


@dataclass
class VoxelInit:
    """Initialization knobs for freshly created voxels."""

    noise_sigma: float = 1e-3
    target_alpha: float = 1e-2
    samples_per_ray: int = 8
    density_shift: float = 0.0
    seed: int = 0


def create_voxel(track, landmark: np.ndarray, patch_size: int,
                 intrinsics: CameraIntrinsics, resolution: int,
                 init: Optional[VoxelInit] = None,
                 track_id: Optional[int] = None) -> VoxelLandmark:
    """Instantiate a voxel centered on a landmark, sized per its track.

    Descriptor nodes warm-start at the mean of the observed patch-center
    descriptors plus seeded noise; density nodes start at the constant raw
    value whose activation yields roughly ``target_alpha`` opacity per
    rendering sample.
    """
    init = init or VoxelInit()
    landmark = np.asarray(landmark, dtype=np.float64).reshape(3)
    focal = (intrinsics.fx + intrinsics.fy) / 2.0
    side = voxel_size(track, landmark, patch_size, focal)

    centers = np.stack([obs.patch.center_descriptor() for obs in track.observations])
    mean_desc = centers.mean(axis=0)
    C = centers.shape[1]
    R = resolution

    rng = np.random.default_rng([int(init.seed), 0xF0C5])
    desc = np.broadcast_to(mean_desc, (R, R, R, C)).copy()
    desc += init.noise_sigma * rng.standard_normal(desc.shape)

    # Raw density such that one sample of length side/N is target_alpha opaque.
    delta = side / init.samples_per_ray
    sigma0 = -np.log1p(-init.target_alpha) / delta
    raw0 = inverse_density_activation(sigma0, init.density_shift)
    density = np.full((R, R, R), raw0)

    return VoxelLandmark(
        center=landmark,
        side=side,
        resolution=R,
        desc_nodes=desc,
        density_nodes=density,
        track_id=track.id if track_id is None else track_id,
    )
