"""End-to-end evaluation: per-query localization metrics and plot data."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .descriptors import SyntheticScene
from .exceptions import LocalizationFailed
from .geometry import Pose, rotation_angle_deg
from .pipeline import derive_seed
from .relocalizer import LocalizeConfig, iterative_localize
from .renderer import render_visible
from .textio import fnum
from .voxel import VoxelMap

_SEED_QUERY = 0x30


@dataclass
class QueryResult:
    index: int
    success: bool
    translation_error: float = float("nan")
    rotation_error_deg: float = float("nan")
    inliers_per_iteration: list = field(default_factory=list)
    residuals_per_iteration: list = field(default_factory=list)
    iterations_run: int = 0


@dataclass
class EvalReport:
    results: list[QueryResult]
    median_translation_error: float
    median_rotation_error_deg: float
    mean_inliers_per_iteration: list
    success_rate: float
    failure_count: int
    query_count: int
    translation_threshold: float
    rotation_threshold_deg: float


def _eval_one(args) -> QueryResult:
    vmap, index, view, prior, iterations, cfg = args
    query = (view.keypoints, view.descriptor_map)
    try:
        est = iterative_localize(vmap, query, prior, iterations, cfg)
    except LocalizationFailed:
        return QueryResult(index=index, success=False)
    t_err = float(np.linalg.norm(est.pose.translation - view.pose.translation))
    r_err = rotation_angle_deg(est.pose.rotation, view.pose.rotation)
    return QueryResult(
        index=index, success=True, translation_error=t_err,
        rotation_error_deg=r_err,
        inliers_per_iteration=[p[0] for p in est.per_iteration],
        residuals_per_iteration=[p[1] for p in est.per_iteration],
        iterations_run=est.iterations_run)


def run_eval(vmap: VoxelMap, queries, priors: list[Pose], iterations: int = 3,
             cfg: LocalizeConfig | None = None,
             translation_threshold: float = 0.05,
             rotation_threshold_deg: float = 5.0,
             workers: int = 1) -> EvalReport:
    """Localize every query against its prior and aggregate the errors.

    ``queries`` holds View objects (their poses are the ground truth);
    failed queries are counted but excluded from the medians. Each query
    localizes under a seed derived from the config seed and its index, so
    the report is identical for any ``workers`` count.
    """
    if len(queries) != len(priors):
        raise ValueError("queries and priors must align")
    cfg = cfg or LocalizeConfig()
    jobs = [(vmap, i, view, prior, iterations,
             replace(cfg, seed=derive_seed(cfg.seed, _SEED_QUERY, i)))
            for i, (view, prior) in enumerate(zip(queries, priors))]
    if workers <= 1:
        results = [_eval_one(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_eval_one, jobs, chunksize=1))

    ok = [r for r in results if r.success]
    med_t = float(np.median([r.translation_error for r in ok])) if ok else float("nan")
    med_r = float(np.median([r.rotation_error_deg for r in ok])) if ok else float("nan")
    mean_inliers = []
    for k in range(iterations):
        vals = [r.inliers_per_iteration[k] for r in ok
                if len(r.inliers_per_iteration) > k]
        mean_inliers.append(float(np.mean(vals)) if vals else float("nan"))
    hits = [r for r in ok if r.translation_error <= translation_threshold
            and r.rotation_error_deg <= rotation_threshold_deg]
    return EvalReport(
        results=results,
        median_translation_error=med_t,
        median_rotation_error_deg=med_r,
        mean_inliers_per_iteration=mean_inliers,
        success_rate=len(hits) / len(results) if results else 0.0,
        failure_count=len(results) - len(ok),
        query_count=len(results),
        translation_threshold=translation_threshold,
        rotation_threshold_deg=rotation_threshold_deg,
    )


def write_report(report: EvalReport, path) -> None:
    """Structured-text summary plus one row per query."""
    with open(path, "w") as f:
        f.write(f"queries {report.query_count}\n")
        f.write(f"failures {report.failure_count}\n")
        f.write(f"median_translation_error {fnum(report.median_translation_error)}\n")
        f.write(f"median_rotation_error_deg {fnum(report.median_rotation_error_deg)}\n")
        f.write(f"success_rate {fnum(report.success_rate)} "
                f"(t <= {fnum(report.translation_threshold)} m, "
                f"R <= {fnum(report.rotation_threshold_deg)} deg)\n")
        f.write("query success t_err_m r_err_deg inliers_per_iteration\n")
        for r in report.results:
            inl = ",".join(str(v) for v in r.inliers_per_iteration) or "-"
            f.write(f"{r.index} {int(r.success)} {fnum(r.translation_error)} "
                    f"{fnum(r.rotation_error_deg)} {inl}\n")


def write_inlier_table(report: EvalReport, path) -> None:
    """Plot data: mean inlier count per localization iteration."""
    with open(path, "w") as f:
        f.write("iteration mean_inliers\n")
        for k, v in enumerate(report.mean_inliers_per_iteration, start=1):
            f.write(f"{k} {fnum(v)}\n")


def rendered_similarity_sweep(vmap: VoxelMap, poses_by_angle, n_samples: int = 8,
                              density_shift: float = 0.0) -> list[tuple[float, float]]:
    """Median cosine of rendered descriptors against their 0-degree render.

    ``poses_by_angle`` is a list of (angle_deg, pose); the reference is the
    entry whose angle is closest to zero. Landmarks are compared by id, so
    voxels culled at some angle simply drop out of that angle's median.
    """
    angles = [a for a, _ in poses_by_angle]
    ref_idx = int(np.argmin(np.abs(np.asarray(angles))))
    rendered = []
    for _, pose in poses_by_angle:
        feats = render_visible(vmap, pose, n_samples, opacity_min=0.0,
                               density_shift=density_shift)
        rendered.append({f.landmark_id: f.descriptor for f in feats})
    ref = rendered[ref_idx]
    out = []
    for (angle, _), feats in zip(poses_by_angle, rendered):
        sims = []
        for lid, desc in feats.items():
            if lid not in ref:
                continue
            a, b = desc, ref[lid]
            na, nb = np.linalg.norm(a), np.linalg.norm(b)
            if na > 1e-12 and nb > 1e-12:
                sims.append(float(a @ b / (na * nb)))
        out.append((float(angle), float(np.median(sims)) if sims else float("nan")))
    return out


def oracle_similarity_sweep(scene: SyntheticScene, poses_by_angle
                            ) -> list[tuple[float, float]]:
    """Same sweep on the raw oracle descriptors (no rendering involved)."""
    angles = [a for a, _ in poses_by_angle]
    ref_idx = int(np.argmin(np.abs(np.asarray(angles))))
    per_angle = [scene.view_descriptors(pose.camera_center)
                 for _, pose in poses_by_angle]
    ref = per_angle[ref_idx]
    out = []
    for (angle, _), descs in zip(poses_by_angle, per_angle):
        sims = np.sum(descs * ref, axis=1)  # all unit norm
        out.append((float(angle), float(np.median(sims))))
    return out


def write_sweep(rows: list[tuple[float, float]], path,
                label: str = "median_similarity") -> None:
    with open(path, "w") as f:
        f.write(f"angle_deg {label}\n")
        for angle, value in rows:
            f.write(f"{fnum(angle)} {fnum(value)}\n")
