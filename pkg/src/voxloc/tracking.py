"""Landmark tracks across a posed frame sequence.

Tracking is realized as per-frame mutual nearest neighbors in descriptor
space, restricted to a spatial search radius. A track ends as soon as its
keypoint finds no admissible match in the next frame; keypoints too close
to the border to crop a full patch never join a track.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .descriptors import (
    BorderViolation,
    DescriptorMap,
    Keypoint,
    Patch,
    crop_patch,
    similarity_matrix,
)
from .exceptions import ChannelMismatch
from .geometry import Pose
from .textio import fnum


@dataclass
class Observation:
    frame_index: int
    pose: Pose
    keypoint: Keypoint
    patch: Patch


@dataclass
class Track:
    """One landmark's observation history, temporally ordered."""

    id: int
    observations: list[Observation]

    def __len__(self) -> int:
        return len(self.observations)

    def frame_indices(self) -> list[int]:
        return [o.frame_index for o in self.observations]


def _keypoint_descriptors(keypoints: list[Keypoint], dmap: DescriptorMap) -> np.ndarray:
    if not keypoints:
        return np.zeros((0, dmap.channels))
    return np.stack([dmap.at(kp.position) for kp in keypoints])


def match_consecutive(prev: tuple[list[Keypoint], DescriptorMap],
                      next_: tuple[list[Keypoint], DescriptorMap],
                      radius: float, min_sim: float) -> list[tuple[int, int]]:
    """Mutual-nearest-neighbor pairs between two keypoint sets.

    Candidates must lie within ``radius`` pixels of each other; admitted
    pairs are row and column maxima of the cosine similarity matrix with
    similarity >= min_sim. Ties resolve to the lower index (argmax order),
    making the result deterministic.
    """
    kps_a, map_a = prev
    kps_b, map_b = next_
    if map_a.channels != map_b.channels:
        raise ChannelMismatch(
            f"frames have {map_a.channels} vs {map_b.channels} channels")
    if not kps_a or not kps_b:
        return []

    pos_a = np.stack([kp.position for kp in kps_a])
    pos_b = np.stack([kp.position for kp in kps_b])
    d2 = ((pos_a[:, None, :] - pos_b[None, :, :]) ** 2).sum(axis=2)
    sim = similarity_matrix(_keypoint_descriptors(kps_a, map_a),
                            _keypoint_descriptors(kps_b, map_b))
    sim = np.where(d2 <= radius * radius, sim, -np.inf)

    pairs = []
    best_b = sim.argmax(axis=1)
    best_a = sim.argmax(axis=0)
    for i, j in enumerate(best_b):
        if sim[i, j] >= min_sim and np.isfinite(sim[i, j]) and best_a[j] == i:
            pairs.append((i, int(j)))
    return pairs


def build_tracks(frames: list[tuple[Pose, list[Keypoint], DescriptorMap]],
                 patch_size: int, radius: float, min_sim: float) -> list[Track]:
    """Chain consecutive matches into tracks, cropping a patch per observation.

    Track ids are assigned in order of creation (frame, then keypoint index),
    so output is deterministic. Keypoints whose patch would exit the image
    terminate, or never start, a track.
    """
    if len(frames) < 2:
        raise ValueError("need at least two frames to track")

    tracks: list[Track] = []
    # Keypoint index in the current frame -> index into `tracks` of the open track.
    open_tracks: dict[int, int] = {}

    def observation(frame_idx: int, pose: Pose, kp: Keypoint,
                    dmap: DescriptorMap):
        try:
            patch = crop_patch(dmap, kp, patch_size)
        except BorderViolation:
            return None
        return Observation(frame_idx, pose, kp, patch)

    pose0, kps0, map0 = frames[0]
    for i, kp in enumerate(kps0):
        obs = observation(0, pose0, kp, map0)
        if obs is None:
            continue
        open_tracks[i] = len(tracks)
        tracks.append(Track(id=len(tracks), observations=[obs]))

    for f in range(1, len(frames)):
        prev_pose, prev_kps, prev_map = frames[f - 1]
        pose, kps, dmap = frames[f]
        pairs = match_consecutive((prev_kps, prev_map), (kps, dmap),
                                  radius, min_sim)
        matched_next = {}
        for i, j in pairs:
            if i in open_tracks:
                matched_next[j] = open_tracks[i]

        next_open: dict[int, int] = {}
        for j, kp in enumerate(kps):
            obs = observation(f, pose, kp, dmap)
            if obs is None:
                continue
            if j in matched_next:
                t = matched_next[j]
                tracks[t].observations.append(obs)
                next_open[j] = t
            else:
                next_open[j] = len(tracks)
                tracks.append(Track(id=len(tracks), observations=[obs]))
        open_tracks = next_open

    return tracks


def filter_tracks(tracks: list[Track], min_length: int) -> list[Track]:
    """Keep tracks with at least ``min_length`` observations, order preserved."""
    if min_length < 2:
        raise ValueError("min_length must be at least 2")
    return [t for t in tracks if len(t) >= min_length]


def dump_tracks(tracks: list[Track], path) -> None:
    """Debug dump: one record per track with frame indices and pixel coordinates."""
    with open(path, "w") as f:
        f.write(f"tracks {len(tracks)}\n")
        for t in tracks:
            f.write(f"track {t.id} length {len(t)}\n")
            for o in t.observations:
                u, v = o.keypoint.position
                f.write(f"  {o.frame_index} {fnum(u)} {fnum(v)}\n")
