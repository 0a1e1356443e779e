"""Landmark triangulation: DLT initialization plus robust LM refinement.

Refinement runs over an inverse-depth parameterization (bearing in the
anchor camera plus inverse depth) and minimizes a Geman-McClure robust
reprojection cost, which bounds the influence of gross outliers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DegenerateGeometry, NegativeDepth, NonConvergence
from .geometry import CameraIntrinsics

_MIN_BASELINE = 1e-6
_MIN_RHO = 1e-8


@dataclass
class TriangulationConfig:
    gm_scale: float = 2.0  # pixels
    max_iters: int = 100
    lambda0: float = 1e-3
    step_tol: float = 1e-10
    cost_tol: float = 1e-12
    inlier_scale: float = 3.0  # inlier cutoff, in units of gm_scale


@dataclass
class Landmark:
    position: np.ndarray  # (3,) meters, world frame
    track_id: int
    mean_reprojection_error: float

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(self.position)):
            raise ValueError("landmark position must be finite")
        if self.mean_reprojection_error < 0:
            raise ValueError("mean reprojection error must be non-negative")


@dataclass
class InverseDepthParam:
    """Bearing (x/z, y/z) in the anchor camera plus inverse depth rho = 1/z."""

    anchor_frame: int
    bearing: np.ndarray  # (2,)
    rho: float

    def __post_init__(self):
        self.bearing = np.asarray(self.bearing, dtype=np.float64).reshape(2)
        if self.rho <= 0:
            raise ValueError("inverse depth must be positive")


def _projection_matrices(track, intr: CameraIntrinsics) -> list[np.ndarray]:
    K = intr.matrix()
    mats = []
    for obs in track.observations:
        R = obs.pose.rotation
        t = obs.pose.translation
        mats.append(K @ np.hstack([R.T, (-R.T @ t)[:, None]]))
    return mats


def dlt_triangulate(track, intr: CameraIntrinsics) -> np.ndarray:
    """Direct linear transform over all observations of a track.

    Solves the stacked homogeneous projection constraints by SVD and returns
    the world-frame point. Raises DegenerateGeometry when the baseline is
    (numerically) zero or the solution direction is ambiguous.
    """
    obs = track.observations
    if len(obs) < 2:
        raise ValueError("need at least two observations")
    centers = np.stack([o.pose.camera_center for o in obs])
    baseline = np.max(np.linalg.norm(centers[:, None, :] - centers[None, :, :],
                                     axis=2))
    if baseline < _MIN_BASELINE:
        raise DegenerateGeometry(f"baseline {baseline:.3g} m below {_MIN_BASELINE}")

    rows = []
    for o, P in zip(obs, _projection_matrices(track, intr)):
        u, v = o.keypoint.position
        rows.append(u * P[2] - P[0])
        rows.append(v * P[2] - P[1])
    A = np.stack(rows)
    _, s, vt = np.linalg.svd(A)
    if s[-2] - s[-1] < 1e-9 * s[0]:
        raise DegenerateGeometry("smallest singular values nearly equal")
    X = vt[-1]
    if abs(X[3]) < 1e-12 * np.linalg.norm(X[:3]):
        raise DegenerateGeometry("solution lies at infinity")
    return X[:3] / X[3]


def params_from_point(point, anchor_pose) -> InverseDepthParam:
    """Inverse-depth parameters of a world point in the anchor camera."""
    p = anchor_pose.world_to_camera(np.asarray(point, dtype=np.float64).reshape(3))
    if p[2] <= 0:
        raise NegativeDepth(f"anchor-frame depth {p[2]:.6g} <= 0")
    return InverseDepthParam(anchor_frame=0,
                             bearing=np.array([p[0] / p[2], p[1] / p[2]]),
                             rho=1.0 / p[2])


def point_from_params(params: InverseDepthParam, anchor_pose) -> np.ndarray:
    p_anchor = np.array([params.bearing[0], params.bearing[1], 1.0]) / params.rho
    return anchor_pose.apply(p_anchor)


def residuals_and_jacobian(track, intr: CameraIntrinsics,
                           theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reprojection residuals and their Jacobian w.r.t. (alpha, beta, rho).

    Returns (residuals (n, 2), jacobian (n, 2, 3)). Observations whose trial
    depth is non-positive get infinite residuals and zero Jacobian rows, so
    such steps are rejected by the cost comparison.
    """
    alpha, beta, rho = theta
    anchor = track.observations[0].pose
    p_anchor = np.array([alpha, beta, 1.0]) / rho
    p_world = anchor.apply(p_anchor)
    # World-frame derivative of the point w.r.t. the three parameters.
    danchor = np.array([[1.0 / rho, 0.0, -alpha / rho**2],
                        [0.0, 1.0 / rho, -beta / rho**2],
                        [0.0, 0.0, -1.0 / rho**2]])
    dworld = anchor.rotation @ danchor  # (3, 3)

    n = len(track.observations)
    res = np.zeros((n, 2))
    jac = np.zeros((n, 2, 3))
    for i, obs in enumerate(track.observations):
        R = obs.pose.rotation
        p_cam = R.T @ (p_world - obs.pose.translation)
        x, y, z = p_cam
        if z <= 1e-12:
            res[i] = np.inf
            continue
        u = intr.fx * x / z + intr.cx
        v = intr.fy * y / z + intr.cy
        res[i] = [u - obs.keypoint.position[0], v - obs.keypoint.position[1]]
        dproj = np.array([[intr.fx / z, 0.0, -intr.fx * x / z**2],
                          [0.0, intr.fy / z, -intr.fy * y / z**2]])
        jac[i] = dproj @ (R.T @ dworld)
    return res, jac


def _robust_cost(res: np.ndarray, c: float) -> float:
    norms2 = (res ** 2).sum(axis=1)
    if not np.all(np.isfinite(norms2)):
        return np.inf
    return float(np.sum(norms2 / (1.0 + norms2 / c**2)))


def refine_landmark(track, init, intr: CameraIntrinsics,
                    cfg: TriangulationConfig | None = None) -> Landmark:
    """Levenberg-Marquardt refinement of a landmark under a robust cost.

    Minimizes sum_i rho_gm(||reprojection residual_i||) with the
    Geman-McClure kernel rho_gm(r) = r^2 / (1 + r^2/c^2) over the
    inverse-depth parameters anchored at the first observation.
    """
    cfg = cfg or TriangulationConfig()
    anchor = track.observations[0].pose
    params = params_from_point(init, anchor)
    theta = np.array([params.bearing[0], params.bearing[1], params.rho])

    c = cfg.gm_scale
    res, _ = residuals_and_jacobian(track, intr, theta)
    cost = _robust_cost(res, c)
    lam = cfg.lambda0

    converged = False
    for _ in range(cfg.max_iters):
        res, jac = residuals_and_jacobian(track, intr, theta)
        norms2 = (res ** 2).sum(axis=1)
        w = 2.0 / (1.0 + norms2 / c**2) ** 2
        H = np.einsum("i,iaj,iak->jk", w, jac, jac)
        g = np.einsum("i,iaj,ia->j", w, jac, res)

        accepted = False
        step = np.zeros(3)
        new_cost = cost
        for _ in range(60):
            try:
                step = np.linalg.solve(H + lam * np.eye(3), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            trial = theta + step
            if trial[2] <= _MIN_RHO:
                if lam > 1e10:
                    raise NegativeDepth("inverse depth driven to zero")
                lam *= 10.0
                continue
            trial_res, _ = residuals_and_jacobian(track, intr, trial)
            trial_cost = _robust_cost(trial_res, c)
            if trial_cost <= cost:
                theta = trial
                new_cost = trial_cost
                lam = max(lam / 10.0, 1e-15)
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            # No descent direction at any damping: local minimum.
            converged = True
            break
        if (np.linalg.norm(step) < cfg.step_tol
                or cost - new_cost < cfg.cost_tol * max(cost, 1e-300)):
            cost = new_cost
            converged = True
            break
        cost = new_cost

    if not converged:
        raise NonConvergence(f"no convergence after {cfg.max_iters} iterations")

    position = point_from_params(
        InverseDepthParam(0, theta[:2], theta[2]), anchor)
    res, _ = residuals_and_jacobian(track, intr, theta)
    norms = np.linalg.norm(res, axis=1)
    inliers = norms <= cfg.inlier_scale * c
    mean_err = float(norms[inliers].mean()) if np.any(inliers) else float(norms.mean())
    return Landmark(position=position, track_id=track.id,
                    mean_reprojection_error=mean_err)


def robust_cost(track, intr: CameraIntrinsics, point,
                cfg: TriangulationConfig | None = None) -> float:
    """Robust reprojection cost of a world point against a track."""
    cfg = cfg or TriangulationConfig()
    params = params_from_point(point, track.observations[0].pose)
    theta = np.array([params.bearing[0], params.bearing[1], params.rho])
    res, _ = residuals_and_jacobian(track, intr, theta)
    return _robust_cost(res, cfg.gm_scale)
