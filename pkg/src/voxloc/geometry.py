"""Camera model, rigid poses, projection, and ray generation.

Pose convention used everywhere in this package: camera-to-world. A pose
maps camera-frame coordinates into the world frame via ``R @ x + t``; the
camera center in the world frame is therefore ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import NonPositiveDepth

_ORTHO_TOL = 1e-9
_UNIT_TOL = 1e-12


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera without distortion."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform (rotation 3x3, translation 3-vector)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if np.max(np.abs(R.T @ R - np.eye(3))) > _ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation determinant must be +1")
        object.__setattr__(self, "rotation", _readonly(R))
        object.__setattr__(self, "translation", _readonly(t))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        """Build from a 3x4 or 4x4 [R|t] matrix."""
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix34(self) -> np.ndarray:
        return np.hstack([self.rotation, self.translation[:, None]])

    @property
    def camera_center(self) -> np.ndarray:
        return self.translation

    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other: apply ``other`` first, then ``self``."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map camera-frame point(s) to the world frame."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return (p - self.translation) @ self.rotation


@dataclass(frozen=True)
class Ray:
    """World-frame ray with unit direction."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(d)
        if abs(n - 1.0) > _UNIT_TOL:
            raise ValueError("ray direction must be unit length")
        object.__setattr__(self, "origin", _readonly(o))
        object.__setattr__(self, "direction", _readonly(d))


def project(pose: Pose, intr: CameraIntrinsics, point: np.ndarray) -> np.ndarray:
    """Pinhole projection of a world point; raises NonPositiveDepth if z <= 0."""
    p_cam = pose.world_to_camera(np.asarray(point, dtype=np.float64).reshape(3))
    if p_cam[2] <= 0:
        raise NonPositiveDepth(f"camera-frame depth {p_cam[2]:.6g} <= 0")
    u = intr.fx * p_cam[0] / p_cam[2] + intr.cx
    v = intr.fy * p_cam[1] / p_cam[2] + intr.cy
    return np.array([u, v])


def project_points(pose: Pose, intr: CameraIntrinsics,
                   points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection.

    Returns (pixels (N,2), depths (N,)); pixels of non-positive-depth points
    are NaN and must be masked by the caller via the returned depths.
    """
    p_cam = pose.world_to_camera(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    z = p_cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * p_cam[:, 0] / z + intr.cx
        v = intr.fy * p_cam[:, 1] / z + intr.cy
    pix = np.stack([u, v], axis=1)
    pix[z <= 0] = np.nan
    return pix, z


def ray_through_pixel(pose: Pose, intr: CameraIntrinsics, pixel) -> Ray:
    """World-frame ray from the camera center through a (sub-)pixel location."""
    u, v = float(pixel[0]), float(pixel[1])
    d_cam = np.array([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0])
    d_world = pose.rotation @ d_cam
    return Ray(pose.camera_center, d_world / np.linalg.norm(d_world))


def rays_through_pixels(pose: Pose, intr: CameraIntrinsics,
                        pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized ray generation: returns (origins (N,3), unit directions (N,3))."""
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    d_cam = np.stack(
        [(px[:, 0] - intr.cx) / intr.fx,
         (px[:, 1] - intr.cy) / intr.fy,
         np.ones(len(px))],
        axis=1,
    )
    d_world = d_cam @ pose.rotation.T
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    origins = np.broadcast_to(pose.camera_center, d_world.shape).copy()
    return origins, d_world


def ray_box_intersect(ray: Ray, center: np.ndarray, side: float):
    """Slab test of a ray against the axis-aligned cube [center ± side/2].

    Returns (t_near, t_far) with t_near clamped to 0 when the origin is
    inside the cube, or None on a miss (t_far <= max(t_near, 0)).
    """
    res = ray_box_intersect_many(ray.origin[None, :], ray.direction[None, :],
                                 center, side)
    t0, t1, hit = res[0][0], res[1][0], res[2][0]
    if not hit:
        return None
    return float(t0), float(t1)


def ray_box_intersect_many(origins: np.ndarray, directions: np.ndarray,
                           center, side: float):
    """Vectorized slab test. Returns (t_near (N,), t_far (N,), hit_mask (N,))."""
    if side <= 0:
        raise ValueError("side must be positive")
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    c = np.asarray(center, dtype=np.float64).reshape(3)
    lo = c - side / 2.0
    hi = c + side / 2.0

    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t_lo = (lo - o) * inv
        t_hi = (hi - o) * inv

    t_min = np.minimum(t_lo, t_hi)
    t_max = np.maximum(t_lo, t_hi)

    # Axis-parallel rays: the slab imposes no constraint when the origin is
    # inside and forces a miss when outside. 0 * inf also produces NaN above,
    # so rebuild those entries after the min/max sort.
    par = d == 0.0
    if np.any(par):
        inside = (o >= lo) & (o <= hi)
        t_min = np.where(par, np.where(inside, -np.inf, np.inf), t_min)
        t_max = np.where(par, np.where(inside, np.inf, -np.inf), t_max)

    t_near = t_min.max(axis=1)
    t_far = t_max.min(axis=1)

    hit = t_far > np.maximum(t_near, 0.0)
    t_near = np.maximum(t_near, 0.0)
    return t_near, t_far, hit


def rotation_angle_deg(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Geodesic angle between two rotation matrices, in degrees."""
    cos = (np.trace(Ra.T @ Rb) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))


def rotation_from_axis_angle(w: np.ndarray) -> np.ndarray:
    """Rodrigues exponential map of an axis-angle 3-vector."""
    w = np.asarray(w, dtype=np.float64).reshape(3)
    theta = np.linalg.norm(w)
    K = np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])
    if theta < 1e-12:
        return np.eye(3) + K + 0.5 * (K @ K)
    A = np.sin(theta) / theta
    B = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + A * K + B * (K @ K)
