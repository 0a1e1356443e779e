"""Volumetric rendering of descriptors along rays.

A ray hitting a voxel cube is split into N equal sub-segments; densities
and descriptors are trilinearly sampled at the segment midpoints and
alpha-composited front to back:

    delta = ||p_f - p_n|| / N
    alpha_t = 1 - exp(-sigma_t * delta)
    T_t = prod_{l<t} (1 - alpha_l)
    descriptor = sum_t T_t * alpha_t * d_t,   opacity = sum_t T_t * alpha_t

There is no view-dependent head: the rendered descriptor depends on the
ray only through where it crosses the lattice.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import NoIntersection, OutOfFrustum
from .geometry import (
    CameraIntrinsics,
    Pose,
    Ray,
    project,
    ray_box_intersect_many,
    rays_through_pixels,
)
from .voxel import VoxelLandmark, VoxelMap, density_activation, trilinear_sample_many

DEFAULT_SAMPLES_PER_RAY = 8
DEFAULT_OPACITY_MIN = 0.1


@dataclass
class RaySamples:
    """Midpoint samples of one ray's traversal through a voxel cube."""

    positions: np.ndarray  # (N, 3), ordered along the ray
    delta: float
    raw_density: np.ndarray  # (N,)
    descriptors: np.ndarray  # (N, C)


@dataclass
class RenderedFeature:
    """A landmark's descriptor as rendered from a query pose."""

    landmark_id: int
    pixel: np.ndarray  # (2,) projection of the voxel center
    descriptor: np.ndarray  # (C,)
    opacity: float
    world_point: np.ndarray  # (3,) voxel center


def sample_positions(origins: np.ndarray, directions: np.ndarray,
                     t_near: np.ndarray, t_far: np.ndarray,
                     n_samples: int) -> tuple[np.ndarray, np.ndarray]:
    """Midpoints of N equal sub-segments per ray: ((B, N, 3) points, (B,) delta)."""
    t_near = np.asarray(t_near, dtype=np.float64).reshape(-1)
    t_far = np.asarray(t_far, dtype=np.float64).reshape(-1)
    delta = (t_far - t_near) / n_samples
    steps = (np.arange(n_samples) + 0.5)
    ts = t_near[:, None] + steps[None, :] * delta[:, None]
    pts = origins[:, None, :] + ts[:, :, None] * directions[:, None, :]
    return pts, delta


def composite(sigma: np.ndarray, delta: np.ndarray,
              descriptors: np.ndarray):
    """Front-to-back alpha compositing for a batch of rays.

    Args:
        sigma: (B, N) activated densities.
        delta: (B,) per-ray sample spacing.
        descriptors: (B, N, C) sampled descriptors.

    Returns:
        (rendered (B, C), opacity (B,), alphas (B, N), transmittances (B, N)).
    """
    alpha = 1.0 - np.exp(-sigma * delta[:, None])
    trans = np.cumprod(1.0 - alpha, axis=1)
    trans = np.concatenate([np.ones((alpha.shape[0], 1)), trans[:, :-1]], axis=1)
    weights = trans * alpha
    rendered = np.einsum("bn,bnc->bc", weights, descriptors)
    return rendered, weights.sum(axis=1), alpha, trans


def sample_ray(voxel: VoxelLandmark, ray: Ray, n_samples: int) -> RaySamples:
    """Raw samples of one ray; raises NoIntersection when the cube is missed."""
    t0, t1, hit = ray_box_intersect_many(ray.origin[None, :],
                                         ray.direction[None, :],
                                         voxel.center, voxel.side)
    if not hit[0]:
        raise NoIntersection("ray misses the voxel cube")
    pts, delta = sample_positions(ray.origin[None, :], ray.direction[None, :],
                                  t0, t1, n_samples)
    pts = pts[0]
    raw = trilinear_sample_many(voxel.density_nodes, voxel.center, voxel.side, pts)
    desc = trilinear_sample_many(voxel.desc_nodes, voxel.center, voxel.side, pts)
    return RaySamples(positions=pts, delta=float(delta[0]),
                      raw_density=raw, descriptors=desc)


def render_ray(voxel: VoxelLandmark, ray: Ray,
               n_samples: int = DEFAULT_SAMPLES_PER_RAY,
               density_shift: float = 0.0) -> tuple[np.ndarray, float]:
    """Render one ray through a voxel; returns (descriptor (C,), opacity)."""
    samples = sample_ray(voxel, ray, n_samples)
    sigma = density_activation(samples.raw_density, density_shift)
    rendered, opacity, _, _ = composite(sigma[None, :],
                                        np.array([samples.delta]),
                                        samples.descriptors[None, :, :])
    return rendered[0], float(opacity[0])


def render_rays_batch(voxel: VoxelLandmark, origins: np.ndarray,
                      directions: np.ndarray, n_samples: int,
                      density_shift: float = 0.0):
    """Render many rays against one voxel.

    Missing rays yield zero descriptors and zero opacity. Returns
    (rendered (B, C), opacity (B,), hit_mask (B,)).
    """
    B = len(origins)
    C = voxel.channels
    t0, t1, hit = ray_box_intersect_many(origins, directions,
                                         voxel.center, voxel.side)
    rendered = np.zeros((B, C))
    opacity = np.zeros(B)
    if np.any(hit):
        pts, delta = sample_positions(origins[hit], directions[hit],
                                      t0[hit], t1[hit], n_samples)
        flat = pts.reshape(-1, 3)
        raw = trilinear_sample_many(voxel.density_nodes, voxel.center,
                                    voxel.side, flat).reshape(pts.shape[:2])
        desc = trilinear_sample_many(voxel.desc_nodes, voxel.center,
                                     voxel.side, flat).reshape(*pts.shape[:2], C)
        sigma = density_activation(raw, density_shift)
        r, o, _, _ = composite(sigma, delta, desc)
        rendered[hit] = r
        opacity[hit] = o
    return rendered, opacity, hit


def render_patch(voxel: VoxelLandmark, pose: Pose, intr: CameraIntrinsics,
                 patch_size: int, n_samples: int = DEFAULT_SAMPLES_PER_RAY,
                 density_shift: float = 0.0) -> np.ndarray:
    """Render the S x S patch of rays around the projected voxel center.

    Rays pass through the pixel centers of the window around the rounded
    projection; rays that miss the cube yield exactly zero vectors. Raises
    OutOfFrustum when the center does not project with the required margin.
    """
    try:
        pix = project(pose, intr, voxel.center)
    except Exception as e:
        raise OutOfFrustum(str(e)) from e
    cx = int(np.floor(pix[0] + 0.5))
    cy = int(np.floor(pix[1] + 0.5))
    h = patch_size // 2
    if (cx - h < 0 or cy - h < 0
            or cx + h > intr.width - 1 or cy + h > intr.height - 1):
        raise OutOfFrustum(
            f"voxel center projects at ({cx}, {cy}); margin {h} unavailable")

    us, vs = np.meshgrid(np.arange(cx - h, cx + h + 1),
                         np.arange(cy - h, cy + h + 1))
    pixels = np.stack([us.ravel(), vs.ravel()], axis=1).astype(np.float64)
    origins, dirs = rays_through_pixels(pose, intr, pixels)
    rendered, _, _ = render_rays_batch(voxel, origins, dirs, n_samples,
                                       density_shift)
    return rendered.reshape(patch_size, patch_size, voxel.channels)


def render_visible(vmap: VoxelMap, pose: Pose,
                   n_samples: int = DEFAULT_SAMPLES_PER_RAY,
                   opacity_min: float = DEFAULT_OPACITY_MIN,
                   density_shift: float = 0.0) -> list[RenderedFeature]:
    """Render every voxel whose center projects into the image.

    One ray per voxel, traced from the camera center to the voxel center;
    occlusion is not modeled, so occluded landmarks still render. Features
    with opacity below ``opacity_min`` are dropped.
    """
    feats: list[RenderedFeature] = []
    intr = vmap.intrinsics
    cam = pose.camera_center
    for voxel in vmap.voxels:
        p_cam = pose.world_to_camera(voxel.center)
        if p_cam[2] <= 0:
            continue
        u = intr.fx * p_cam[0] / p_cam[2] + intr.cx
        v = intr.fy * p_cam[1] / p_cam[2] + intr.cy
        if not (0 <= u <= intr.width and 0 <= v <= intr.height):
            continue
        d = voxel.center - cam
        norm = np.linalg.norm(d)
        if norm < 1e-12:
            continue
        ray = Ray(cam, d / norm)
        descriptor, opacity = render_ray(voxel, ray, n_samples, density_shift)
        if opacity < opacity_min:
            continue
        feats.append(RenderedFeature(
            landmark_id=voxel.track_id,
            pixel=np.array([u, v]),
            descriptor=descriptor,
            opacity=opacity,
            world_point=voxel.center.copy(),
        ))
    return feats
