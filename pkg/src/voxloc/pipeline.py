"""Map-building orchestration: tracks -> landmarks -> voxels -> training.

Per-voxel seeds derive from the master seed and the stable track id, so
results are bit-identical for any worker count and across repeated runs.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .exceptions import DegenerateGeometry, NegativeDepth, NonConvergence
from .geometry import CameraIntrinsics
from .tracking import Track, build_tracks, filter_tracks
from .trainer import LossBreakdown, TrainConfig, train_voxel
from .triangulation import Landmark, TriangulationConfig, dlt_triangulate, refine_landmark
from .voxel import VoxelInit, VoxelLandmark, VoxelMap, create_voxel

logger = logging.getLogger(__name__)

_SEED_VOXEL = 0x10
_SEED_TRAIN = 0x20


def derive_seed(master: int, tag: int, ident: int) -> int:
    """Stable per-task seed derived from the master seed and a task id."""
    return int(np.random.SeedSequence([int(master), int(tag),
                                       int(ident)]).generate_state(1)[0])


@dataclass
class BuildConfig:
    patch_size: int = 7
    resolution: int = 3
    match_radius: float = 20.0
    match_min_sim: float = 0.8
    min_track_length: int = 5
    noise_sigma: float = 1e-3
    target_alpha: float = 1e-2
    seed: int = 0


def tracks_from_views(views, cfg: BuildConfig) -> list[Track]:
    frames = [(v.pose, v.keypoints, v.descriptor_map) for v in views]
    tracks = build_tracks(frames, cfg.patch_size, cfg.match_radius,
                          cfg.match_min_sim)
    kept = filter_tracks(tracks, cfg.min_track_length)
    logger.info("tracking: %d tracks, %d past the length gate",
                len(tracks), len(kept))
    return kept


def triangulate_tracks(tracks: list[Track], intr: CameraIntrinsics,
                       cfg: TriangulationConfig | None = None
                       ) -> list[tuple[Track, Landmark]]:
    """DLT + robust refinement per track; degenerate tracks are dropped."""
    cfg = cfg or TriangulationConfig()
    out = []
    for track in tracks:
        try:
            init = dlt_triangulate(track, intr)
            landmark = refine_landmark(track, init, intr, cfg)
        except (DegenerateGeometry, NegativeDepth, NonConvergence) as e:
            logger.warning("track %d dropped: %s", track.id, e)
            continue
        out.append((track, landmark))
    logger.info("triangulation: %d of %d tracks kept", len(out), len(tracks))
    return out


def create_voxels(pairs: list[tuple[Track, Landmark]], intr: CameraIntrinsics,
                  cfg: BuildConfig) -> list[tuple[VoxelLandmark, Track]]:
    """One voxel per (track, landmark) pair, ordered by track id."""
    out = []
    for track, landmark in sorted(pairs, key=lambda p: p[0].id):
        init = VoxelInit(noise_sigma=cfg.noise_sigma,
                         target_alpha=cfg.target_alpha,
                         seed=derive_seed(cfg.seed, _SEED_VOXEL, track.id))
        out.append((create_voxel(track, landmark.position, cfg.patch_size,
                                 intr, cfg.resolution, init), track))
    return out


def _train_job(args):
    voxel, track, cfg, intr = args
    trained, history = train_voxel(voxel, track, cfg, intr)
    return trained, history


def train_voxels(voxel_tracks: list[tuple[VoxelLandmark, Track]],
                 train_cfg: TrainConfig, intr: CameraIntrinsics,
                 workers: int = 1
                 ) -> tuple[list[VoxelLandmark], dict[int, list[LossBreakdown]]]:
    """Train every voxel independently; parallel across voxels when asked.

    The per-voxel seed comes from the config seed and the track id, so the
    trained lattices are identical for any worker count.
    """
    jobs = [(voxel, track,
             replace(train_cfg, seed=derive_seed(train_cfg.seed, _SEED_TRAIN,
                                                 voxel.track_id)),
             intr)
            for voxel, track in voxel_tracks]
    if workers <= 1:
        results = [_train_job(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_train_job, jobs, chunksize=1))
    voxels = [r[0] for r in results]
    histories = {v.track_id: r[1] for v, r in zip(voxels, results)}
    return voxels, histories


def build_voxel_map(views, intr: CameraIntrinsics, build_cfg: BuildConfig,
                    train_cfg: TrainConfig, tri_cfg: TriangulationConfig | None = None,
                    workers: int = 1, extractor: str = "synthetic") -> VoxelMap:
    """Full map construction from posed views."""
    tracks = tracks_from_views(views, build_cfg)
    pairs = triangulate_tracks(tracks, intr, tri_cfg)
    voxel_tracks = create_voxels(pairs, intr, build_cfg)
    channels = views[0].descriptor_map.channels
    voxels, _ = train_voxels(voxel_tracks, train_cfg, intr, workers)
    return VoxelMap(voxels=voxels, intrinsics=intr, channels=channels,
                    patch_size=build_cfg.patch_size, extractor=extractor)
