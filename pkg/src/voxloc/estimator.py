"""Scikit-learn style estimator wrapping the full pipeline.

``fit`` ingests posed training views and builds the trained voxel map;
``predict`` localizes query views given prior poses. All pipeline knobs
are constructor parameters so the estimator composes with scikit-learn
tooling (``get_params``/``set_params``, cloning, grid search over the
numeric knobs).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .descriptors import DescriptorMap, Keypoint
from .exceptions import LocalizationFailed
from .geometry import CameraIntrinsics, Pose
from .pipeline import BuildConfig, build_voxel_map
from .relocalizer import LocalizeConfig, PoseEstimate, RansacConfig, iterative_localize
from .synthetic import View
from .trainer import TrainConfig
from .triangulation import TriangulationConfig


def _as_view(item) -> View:
    if isinstance(item, View):
        return item
    if isinstance(item, (tuple, list)) and len(item) == 3:
        pose, keypoints, dmap = item
        return View(pose=pose, keypoints=list(keypoints), descriptor_map=dmap)
    raise ValueError(
        "views must be View objects or (pose, keypoints, descriptor_map) tuples")


def _validate_views(views: list[View]) -> list[View]:
    if len(views) < 2:
        raise ValueError("need at least two posed views to fit")
    channels = views[0].descriptor_map.channels
    for i, v in enumerate(views):
        if not isinstance(v.pose, Pose):
            raise ValueError(f"view {i}: pose must be a Pose")
        if v.descriptor_map.channels != channels:
            raise ValueError(f"view {i}: channel count differs")
        for kp in v.keypoints:
            if not isinstance(kp, Keypoint):
                raise ValueError(f"view {i}: keypoints must be Keypoint objects")
    return views


def _as_query(item) -> tuple[list[Keypoint], DescriptorMap]:
    if isinstance(item, View):
        return (item.keypoints, item.descriptor_map)
    if isinstance(item, (tuple, list)) and len(item) == 2:
        kps, dmap = item
        return (list(kps), dmap)
    raise ValueError("queries must be View objects or (keypoints, map) tuples")


class VoxelFeatureLocalizer(BaseEstimator):
    """Camera relocalizer backed by per-landmark trained voxel grids.

    Parameters mirror the pipeline defaults; see the package README for
    their meaning. The fitted state is a single ``map_`` attribute holding
    the trained :class:`~voxloc.voxel.VoxelMap`.
    """

    def __init__(self, patch_size=7, grid_resolution=3, samples_per_ray=8,
                 min_track_length=5, match_radius=20.0, match_min_sim=0.8,
                 gm_scale=2.0, epochs=2000, rays_per_epoch=1024,
                 lr_desc=0.1, lr_density=0.1, w_mse=1.0, w_cos=1.0,
                 w_tv=1e-2, w_ent=1e-3, similarity_threshold=0.7,
                 ransac_threshold_px=3.0, ransac_confidence=0.999,
                 ransac_max_iters=1000, opacity_min=0.1,
                 refine_iterations=3, seed=0, n_workers=1):
        self.patch_size = patch_size
        self.grid_resolution = grid_resolution
        self.samples_per_ray = samples_per_ray
        self.min_track_length = min_track_length
        self.match_radius = match_radius
        self.match_min_sim = match_min_sim
        self.gm_scale = gm_scale
        self.epochs = epochs
        self.rays_per_epoch = rays_per_epoch
        self.lr_desc = lr_desc
        self.lr_density = lr_density
        self.w_mse = w_mse
        self.w_cos = w_cos
        self.w_tv = w_tv
        self.w_ent = w_ent
        self.similarity_threshold = similarity_threshold
        self.ransac_threshold_px = ransac_threshold_px
        self.ransac_confidence = ransac_confidence
        self.ransac_max_iters = ransac_max_iters
        self.opacity_min = opacity_min
        self.refine_iterations = refine_iterations
        self.seed = seed
        self.n_workers = n_workers

    def _build_config(self) -> BuildConfig:
        return BuildConfig(patch_size=self.patch_size,
                           resolution=self.grid_resolution,
                           match_radius=self.match_radius,
                           match_min_sim=self.match_min_sim,
                           min_track_length=self.min_track_length,
                           seed=self.seed)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs,
                           rays_per_epoch=self.rays_per_epoch,
                           lr_desc=self.lr_desc, lr_density=self.lr_density,
                           w_mse=self.w_mse, w_cos=self.w_cos, w_tv=self.w_tv,
                           w_ent=self.w_ent, seed=self.seed,
                           n_samples=self.samples_per_ray)

    def _localize_config(self) -> LocalizeConfig:
        return LocalizeConfig(tau=self.similarity_threshold,
                              n_samples=self.samples_per_ray,
                              opacity_min=self.opacity_min,
                              seed=self.seed,
                              ransac=RansacConfig(
                                  threshold_px=self.ransac_threshold_px,
                                  max_iters=self.ransac_max_iters,
                                  confidence=self.ransac_confidence))

    def fit(self, X, y=None, *, intrinsics: CameraIntrinsics = None):
        """Build and train the voxel map from posed views.

        Args:
            X: sequence of View objects or (pose, keypoints, descriptor_map)
                tuples.
            y: ignored, present for scikit-learn API compatibility.
            intrinsics: shared pinhole intrinsics of all views (required).
        """
        if intrinsics is None:
            raise ValueError("intrinsics is required to fit")
        views = _validate_views([_as_view(v) for v in X])
        self.map_ = build_voxel_map(
            views, intrinsics, self._build_config(), self._train_config(),
            TriangulationConfig(gm_scale=self.gm_scale),
            workers=self.n_workers)
        self.n_voxels_ = len(self.map_.voxels)
        self.intrinsics_ = intrinsics
        return self

    def localize(self, X, priors) -> list[PoseEstimate | None]:
        """Full localization results per query; None where localization failed."""
        check_is_fitted(self, "map_")
        queries = [_as_query(q) for q in X]
        if len(queries) != len(priors):
            raise ValueError("queries and priors must align")
        cfg = self._localize_config()
        out = []
        for query, prior in zip(queries, priors):
            try:
                out.append(iterative_localize(self.map_, query, prior,
                                              self.refine_iterations, cfg))
            except LocalizationFailed:
                out.append(None)
        return out

    def predict(self, X, priors) -> np.ndarray:
        """Localized camera-to-world poses as an (n, 3, 4) array.

        Failed queries yield all-NaN entries.
        """
        estimates = self.localize(X, priors)
        out = np.full((len(estimates), 3, 4), np.nan)
        for i, est in enumerate(estimates):
            if est is not None:
                out[i] = est.pose.matrix34()
        return out

    def score(self, X, y, priors=None) -> float:
        """Negative median translation error against ground-truth poses."""
        if priors is None:
            priors = y
        estimates = self.localize(X, priors)
        errs = [float(np.linalg.norm(e.pose.translation - gt.translation))
                for e, gt in zip(estimates, y) if e is not None]
        if not errs:
            return float("-inf")
        return -float(np.median(errs))
