"""2D-3D matching, PnP-in-RANSAC, and the iterative localization loop.

Rendered landmark descriptors are matched against query keypoint
descriptors by mutual maxima of the cosine similarity matrix; the
surviving 2D-3D correspondences feed a P3P-based RANSAC whose best model
is polished by Levenberg-Marquardt on its inliers. Re-rendering at the
refined pose and repeating sharpens both the matches and the pose.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from numpy.polynomial import polynomial as npoly

from .descriptors import DescriptorMap, Keypoint, similarity_matrix
from .exceptions import (
    DegenerateConfiguration,
    InsufficientCorrespondences,
    LocalizationFailed,
    NoModelFound,
)
from .geometry import CameraIntrinsics, Pose
from .renderer import (
    DEFAULT_OPACITY_MIN,
    DEFAULT_SAMPLES_PER_RAY,
    RenderedFeature,
    render_visible,
)
from .voxel import VoxelMap


@dataclass
class Correspondence:
    landmark_id: int
    world_point: np.ndarray  # (3,)
    query_pixel: np.ndarray  # (2,)
    similarity: float


@dataclass
class PoseEstimate:
    pose: Pose
    inlier_count: int
    inlier_ids: list
    iterations_run: int
    per_iteration: list  # (inlier count, median residual px) per iteration


@dataclass
class RansacConfig:
    threshold_px: float = 3.0
    max_iters: int = 1000
    confidence: float = 0.999
    seed: int = 0


@dataclass
class LocalizeConfig:
    tau: float = 0.7
    n_samples: int = DEFAULT_SAMPLES_PER_RAY
    opacity_min: float = DEFAULT_OPACITY_MIN
    density_shift: float = 0.0
    seed: int = 0
    ransac: RansacConfig = field(default_factory=RansacConfig)


def match(rendered: list[RenderedFeature],
          query: tuple[list[Keypoint], DescriptorMap],
          tau: float) -> list[Correspondence]:
    """Mutual-maximum matches above tau between rendered and query descriptors.

    Each rendered feature and each query keypoint is used at most once; the
    query descriptor is read from the dense map at the keypoint's nearest
    pixel.
    """
    keypoints, dmap = query
    if not rendered or not keypoints:
        return []
    rd = np.stack([f.descriptor for f in rendered])
    qd = np.stack([dmap.at(kp.position) for kp in keypoints])
    sim = similarity_matrix(rd, qd)

    best_cols = sim.argmax(axis=1)
    best_rows = sim.argmax(axis=0)
    out = []
    for i, j in enumerate(best_cols):
        s = sim[i, j]
        if np.isfinite(s) and s >= tau and best_rows[j] == i:
            out.append(Correspondence(
                landmark_id=rendered[i].landmark_id,
                world_point=rendered[i].world_point,
                query_pixel=keypoints[j].position.copy(),
                similarity=float(s),
            ))
    return out


def _bearings(intr: CameraIntrinsics, pixels: np.ndarray) -> np.ndarray:
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    d = np.stack([(px[:, 0] - intr.cx) / intr.fx,
                  (px[:, 1] - intr.cy) / intr.fy,
                  np.ones(len(px))], axis=1)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def _kabsch_world_to_camera(world: np.ndarray, cam: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rigid (R, t) minimizing ||R w + t - c||^2 over the point pairs."""
    wc = world.mean(axis=0)
    cc = cam.mean(axis=0)
    H = (world - wc).T @ (cam - cc)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return R, cc - R @ wc


def _polish_distances(s: np.ndarray, sides, cosines) -> np.ndarray:
    """Newton-polish camera-to-point distances on the law-of-cosines system.

    The quartic route loses digits near repeated roots; a few Newton steps
    on the original three equations restore machine precision.
    """
    a, b, c = sides
    ca, cb, cg = cosines
    s = s.copy()
    for _ in range(5):
        s1, s2, s3 = s
        g = np.array([
            s2 * s2 + s3 * s3 - 2.0 * s2 * s3 * ca - a * a,
            s1 * s1 + s3 * s3 - 2.0 * s1 * s3 * cb - b * b,
            s1 * s1 + s2 * s2 - 2.0 * s1 * s2 * cg - c * c,
        ])
        J = np.array([
            [0.0, 2.0 * s2 - 2.0 * s3 * ca, 2.0 * s3 - 2.0 * s2 * ca],
            [2.0 * s1 - 2.0 * s3 * cb, 0.0, 2.0 * s3 - 2.0 * s1 * cb],
            [2.0 * s1 - 2.0 * s2 * cg, 2.0 * s2 - 2.0 * s1 * cg, 0.0],
        ])
        try:
            delta = np.linalg.solve(J, -g)
        except np.linalg.LinAlgError:
            break
        s = s + delta
        if np.max(np.abs(delta)) < 1e-14 * max(1.0, np.max(np.abs(s))):
            break
    return s


def p3p_solve(world: np.ndarray, bearings: np.ndarray) -> list[Pose]:
    """Grunert's three-point pose: up to four camera-to-world solutions.

    Solves the law-of-cosines system for the three camera-to-point
    distances via a quartic, then aligns the recovered camera-frame points
    with the world points. Raises DegenerateConfiguration for collinear
    world points.
    """
    world = np.asarray(world, dtype=np.float64).reshape(3, 3)
    f = np.asarray(bearings, dtype=np.float64).reshape(3, 3)
    scale = np.max(np.linalg.norm(world - world.mean(axis=0), axis=1))
    cross = np.cross(world[1] - world[0], world[2] - world[0])
    if np.linalg.norm(cross) < 1e-10 * max(scale, 1e-12) ** 2:
        raise DegenerateConfiguration("world points are collinear")

    a = np.linalg.norm(world[1] - world[2])
    b = np.linalg.norm(world[0] - world[2])
    c = np.linalg.norm(world[0] - world[1])
    if min(a, b, c) < 1e-12:
        raise DegenerateConfiguration("duplicate world points")
    cos_alpha = float(f[1] @ f[2])
    cos_beta = float(f[0] @ f[2])
    cos_gamma = float(f[0] @ f[1])

    A = (a / b) ** 2
    B = (c / b) ** 2
    # u = N(v) / D(v) after eliminating u^2 between the two distance ratios.
    N = np.array([1.0 + (A - B), -2.0 * (A - B) * cos_beta, (A - B) - 1.0])
    D = np.array([2.0 * cos_gamma, -2.0 * cos_alpha])
    Q = np.array([1.0 - B, 2.0 * B * cos_beta, -B])
    quartic = npoly.polysub(
        npoly.polyadd(npoly.polymul(N, N), npoly.polymul(Q, npoly.polymul(D, D))),
        2.0 * cos_gamma * npoly.polymul(N, D),
    )

    roots = npoly.polyroots(quartic)
    dquartic = npoly.polyder(quartic)
    poses: list[Pose] = []
    for root in roots:
        if abs(root.imag) > 1e-8 * (1.0 + abs(root.real)):
            continue
        v = float(root.real)
        # Newton polish on the quartic.
        for _ in range(3):
            dv = npoly.polyval(v, dquartic)
            if dv == 0:
                break
            v -= npoly.polyval(v, quartic) / dv
        if v <= 0:
            continue
        denom = npoly.polyval(v, D)
        if abs(denom) < 1e-14:
            continue
        u = npoly.polyval(v, N) / denom
        if u <= 0:
            continue
        s1_sq = b * b / (1.0 + v * v - 2.0 * v * cos_beta)
        if s1_sq <= 0:
            continue
        s1 = np.sqrt(s1_sq)
        dists = np.array([s1, u * s1, v * s1])
        dists = _polish_distances(dists, (a, b, c),
                                  (cos_alpha, cos_beta, cos_gamma))
        if np.any(dists <= 0):
            continue
        cam_pts = dists[:, None] * f
        R_wc, t_wc = _kabsch_world_to_camera(world, cam_pts)
        pose = Pose(R_wc.T, -R_wc.T @ t_wc)
        if not any(np.allclose(pose.rotation, p.rotation, atol=1e-9)
                   and np.allclose(pose.translation, p.translation, atol=1e-9)
                   for p in poses):
            poses.append(pose)
    return poses


def reprojection_errors(pose: Pose, intr: CameraIntrinsics,
                        world_points: np.ndarray,
                        pixels: np.ndarray) -> np.ndarray:
    """Per-point reprojection error in pixels; inf for non-positive depth."""
    p_cam = pose.world_to_camera(np.asarray(world_points).reshape(-1, 3))
    z = p_cam[:, 2]
    errs = np.full(len(p_cam), np.inf)
    ok = z > 1e-12
    u = intr.fx * p_cam[ok, 0] / z[ok] + intr.cx
    v = intr.fy * p_cam[ok, 1] / z[ok] + intr.cy
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    errs[ok] = np.hypot(u - px[ok, 0], v - px[ok, 1])
    return errs


def pnp_minimal(correspondences: list[Correspondence],
                intr: CameraIntrinsics) -> list[Pose]:
    """P3P on three correspondences; a fourth, when given, disambiguates.

    Returns all admissible solutions for three points, or a single pose
    (the one minimizing the fourth point's reprojection error) for four.
    """
    n = len(correspondences)
    if n not in (3, 4):
        raise ValueError("pnp_minimal needs exactly 3 or 4 correspondences")
    world = np.stack([c.world_point for c in correspondences[:3]])
    pixels = np.stack([c.query_pixel for c in correspondences[:3]])
    poses = p3p_solve(world, _bearings(intr, pixels))
    if n == 3 or not poses:
        return poses
    w4 = correspondences[3].world_point[None, :]
    p4 = correspondences[3].query_pixel[None, :]
    errs = [reprojection_errors(p, intr, w4, p4)[0] for p in poses]
    return [poses[int(np.argmin(errs))]]


def refine_pose_lm(pose: Pose, intr: CameraIntrinsics, world_points: np.ndarray,
                   pixels: np.ndarray, max_iters: int = 30) -> Pose:
    """LM minimization of the total squared reprojection error over SE(3)."""
    from .geometry import rotation_from_axis_angle

    R_wc = pose.rotation.T.copy()
    t_wc = (-pose.rotation.T @ pose.translation).copy()
    world = np.asarray(world_points, dtype=np.float64).reshape(-1, 3)
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)

    def residuals(R, t):
        p_cam = world @ R.T + t
        z = p_cam[:, 2]
        if np.any(z <= 1e-12):
            return None, None
        u = intr.fx * p_cam[:, 0] / z + intr.cx
        v = intr.fy * p_cam[:, 1] / z + intr.cy
        return np.stack([u - px[:, 0], v - px[:, 1]], axis=1), p_cam

    res, p_cam = residuals(R_wc, t_wc)
    if res is None:
        return pose
    cost = float((res ** 2).sum())
    lam = 1e-3
    for _ in range(max_iters):
        z = p_cam[:, 2]
        x, y = p_cam[:, 0], p_cam[:, 1]
        dproj = np.zeros((len(world), 2, 3))
        dproj[:, 0, 0] = intr.fx / z
        dproj[:, 0, 2] = -intr.fx * x / z**2
        dproj[:, 1, 1] = intr.fy / z
        dproj[:, 1, 2] = -intr.fy * y / z**2
        rotated = p_cam - t_wc  # R_wc @ world
        dp = np.zeros((len(world), 3, 6))
        dp[:, 0, 1] = rotated[:, 2]
        dp[:, 0, 2] = -rotated[:, 1]
        dp[:, 1, 0] = -rotated[:, 2]
        dp[:, 1, 2] = rotated[:, 0]
        dp[:, 2, 0] = rotated[:, 1]
        dp[:, 2, 1] = -rotated[:, 0]
        dp[:, :, 3:] = np.eye(3)
        J = np.einsum("iab,ibk->iak", dproj, dp).reshape(-1, 6)
        r = res.reshape(-1)
        H = J.T @ J
        g = J.T @ r
        stepped = False
        for _ in range(30):
            try:
                delta = np.linalg.solve(H + lam * np.eye(6), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            R_new = rotation_from_axis_angle(delta[:3]) @ R_wc
            t_new = t_wc + delta[3:]
            res_new, p_new = residuals(R_new, t_new)
            if res_new is not None and float((res_new ** 2).sum()) <= cost:
                new_cost = float((res_new ** 2).sum())
                improved = cost - new_cost
                R_wc, t_wc, res, p_cam, cost = R_new, t_new, res_new, p_new, new_cost
                lam = max(lam / 10.0, 1e-12)
                stepped = True
                if improved < 1e-14 * max(cost, 1.0) or np.linalg.norm(delta) < 1e-12:
                    return Pose(R_wc.T, -R_wc.T @ t_wc)
                break
            lam *= 10.0
        if not stepped:
            break
    # Re-orthonormalize before constructing the pose to absorb drift.
    U, _, Vt = np.linalg.svd(R_wc)
    R_wc = U @ np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))]) @ Vt
    return Pose(R_wc.T, -R_wc.T @ t_wc)


def ransac_pose(correspondences: list[Correspondence], intr: CameraIntrinsics,
                cfg: RansacConfig | None = None) -> PoseEstimate:
    """Hypothesize-and-verify pose estimation with a local-optimization step.

    Minimal sets of four are drawn (P3P on three, the fourth disambiguates);
    the best model by inlier count is refined by LM over all its inliers.
    The iteration budget adapts to the observed inlier ratio at the
    configured confidence. Deterministic for a fixed seed.
    """
    cfg = cfg or RansacConfig()
    n = len(correspondences)
    if n < 4:
        raise InsufficientCorrespondences(f"got {n} correspondences, need >= 4")
    world = np.stack([c.world_point for c in correspondences])
    pixels = np.stack([c.query_pixel for c in correspondences])
    rng = np.random.default_rng([int(cfg.seed), 0xA45C])

    best_count = 0
    best_pose = None
    best_inliers = None
    needed = cfg.max_iters
    it = 0
    while it < min(needed, cfg.max_iters):
        it += 1
        sample = rng.choice(n, size=4, replace=False)
        subset = [correspondences[i] for i in sample]
        try:
            candidates = pnp_minimal(subset, intr)
        except DegenerateConfiguration:
            continue
        for pose in candidates:
            errs = reprojection_errors(pose, intr, world, pixels)
            inliers = errs <= cfg.threshold_px
            count = int(inliers.sum())
            if count > best_count:
                best_count = count
                best_pose = pose
                best_inliers = inliers
                ratio = count / n
                if ratio >= 1.0:
                    needed = it
                else:
                    denom = np.log1p(-min(ratio ** 4, 1.0 - 1e-12))
                    needed = int(np.ceil(np.log(1.0 - cfg.confidence) / denom))

    if best_pose is None or best_count < 4:
        raise NoModelFound(f"best inlier count {best_count} below 4")

    refined = refine_pose_lm(best_pose, intr, world[best_inliers],
                             pixels[best_inliers])
    errs_ref = reprojection_errors(refined, intr, world, pixels)
    inliers_ref = errs_ref <= cfg.threshold_px
    if int(inliers_ref.sum()) >= best_count:
        best_pose = refined
        best_inliers = inliers_ref
        best_count = int(inliers_ref.sum())

    errs = reprojection_errors(best_pose, intr, world, pixels)
    median_resid = float(np.median(errs[best_inliers]))
    inlier_ids = [correspondences[i].landmark_id
                  for i in np.nonzero(best_inliers)[0]]
    return PoseEstimate(pose=best_pose, inlier_count=best_count,
                        inlier_ids=inlier_ids, iterations_run=it,
                        per_iteration=[(best_count, median_resid)])


def iterative_localize(vmap: VoxelMap,
                       query: tuple[list[Keypoint], DescriptorMap],
                       prior: Pose, iterations: int = 3,
                       cfg: LocalizeConfig | None = None) -> PoseEstimate:
    """Render-match-solve loop refining a prior pose estimate.

    Each round renders the map at the current estimate, matches against the
    query features, and re-solves the pose. A round that fails to produce a
    model keeps the previous estimate and stops the loop; a failure on the
    very first round raises LocalizationFailed.
    """
    if iterations < 1:
        raise ValueError("need at least one iteration")
    cfg = cfg or LocalizeConfig()
    estimate = prior
    per_iteration = []
    inlier_ids: list = []
    inlier_count = 0
    ran = 0
    for k in range(iterations):
        rendered = render_visible(vmap, estimate, cfg.n_samples,
                                  cfg.opacity_min, cfg.density_shift)
        corrs = match(rendered, query, cfg.tau)
        seed_k = int(np.random.SeedSequence([int(cfg.seed), 0x17E2, k])
                     .generate_state(1)[0])
        try:
            result = ransac_pose(corrs, vmap.intrinsics,
                                 replace(cfg.ransac, seed=seed_k))
        except (InsufficientCorrespondences, NoModelFound) as e:
            if k == 0:
                raise LocalizationFailed(str(e)) from e
            break
        estimate = result.pose
        inlier_ids = result.inlier_ids
        inlier_count = result.inlier_count
        per_iteration.append(result.per_iteration[0])
        ran = k + 1
    return PoseEstimate(pose=estimate, inlier_count=inlier_count,
                        inlier_ids=inlier_ids, iterations_run=ran,
                        per_iteration=per_iteration)
