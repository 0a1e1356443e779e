"""Dataset directory I/O.

A dataset directory holds one posed view sequence:

    poses.txt          frame_index followed by 12 floats, the row-major
                       3x4 camera-to-world [R|t] matrix, per line
    maps/NNNN.fvdm     dense descriptor map, FVDM binary
    keypoints/NNNN.txt "u v score" per line

``intrinsics.txt`` (fx fy cx cy width height, one line) lives next to the
splits. All numeric text uses full-precision repr and reads back exactly.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .descriptors import Keypoint, load_descriptor_map, save_descriptor_map
from .geometry import CameraIntrinsics, Pose
from .textio import fnum
from .synthetic import View


def write_intrinsics(intr: CameraIntrinsics, path) -> None:
    with open(path, "w") as f:
        f.write(f"{fnum(intr.fx)} {fnum(intr.fy)} {fnum(intr.cx)} {fnum(intr.cy)} "
                f"{intr.width} {intr.height}\n")


def read_intrinsics(path) -> CameraIntrinsics:
    parts = Path(path).read_text().split()
    if len(parts) != 6:
        raise ValueError(f"expected 6 fields in {path}, got {len(parts)}")
    return CameraIntrinsics(float(parts[0]), float(parts[1]), float(parts[2]),
                            float(parts[3]), int(parts[4]), int(parts[5]))


def write_views(directory, views: list[View]) -> None:
    d = Path(directory)
    (d / "maps").mkdir(parents=True, exist_ok=True)
    (d / "keypoints").mkdir(parents=True, exist_ok=True)
    with open(d / "poses.txt", "w") as f:
        for i, view in enumerate(views):
            row = view.pose.matrix34().reshape(-1)
            f.write(f"{i} " + " ".join(fnum(x) for x in row) + "\n")
    for i, view in enumerate(views):
        save_descriptor_map(view.descriptor_map, d / "maps" / f"{i:04d}.fvdm")
        with open(d / "keypoints" / f"{i:04d}.txt", "w") as f:
            for kp in view.keypoints:
                f.write(f"{fnum(kp.position[0])} {fnum(kp.position[1])} "
                        f"{fnum(kp.score)}\n")


def read_views(directory) -> list[View]:
    d = Path(directory)
    poses = {}
    for line in (d / "poses.txt").read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 13:
            raise ValueError(f"poses.txt line has {len(parts)} fields, expected 13")
        idx = int(parts[0])
        m = np.array([float(x) for x in parts[1:]]).reshape(3, 4)
        poses[idx] = Pose.from_matrix(m)

    views = []
    for idx in sorted(poses):
        dmap = load_descriptor_map(d / "maps" / f"{idx:04d}.fvdm")
        kps = []
        kp_path = d / "keypoints" / f"{idx:04d}.txt"
        for line in kp_path.read_text().splitlines():
            parts = line.split()
            if not parts:
                continue
            kps.append(Keypoint(np.array([float(parts[0]), float(parts[1])]),
                                float(parts[2])))
        views.append(View(pose=poses[idx], keypoints=kps, descriptor_map=dmap))
    return views


def save_tracks(tracks, path) -> None:
    """Persist tracks (without poses, which poses.txt already holds) as npz."""
    track_ids, frame_idx, kp_pos, kp_score, patches = [], [], [], [], []
    for t in tracks:
        for o in t.observations:
            track_ids.append(t.id)
            frame_idx.append(o.frame_index)
            kp_pos.append(o.keypoint.position)
            kp_score.append(o.keypoint.score)
            patches.append(o.patch.data)
    if not track_ids:
        raise ValueError("no observations to save")
    np.savez(path,
             track_ids=np.array(track_ids, dtype=np.int64),
             frame_indices=np.array(frame_idx, dtype=np.int64),
             keypoints=np.stack(kp_pos),
             scores=np.array(kp_score),
             patches=np.stack(patches))


def load_tracks(path, views: list[View]):
    """Rebuild Track objects from an npz dump, joining poses from the views."""
    from .descriptors import Patch
    from .tracking import Observation, Track

    data = np.load(path)
    track_ids = data["track_ids"]
    frame_idx = data["frame_indices"]
    kps = data["keypoints"]
    scores = data["scores"]
    patches = data["patches"]
    size = patches.shape[1]
    channels = patches.shape[3]

    tracks: dict[int, Track] = {}
    for tid, fidx, kp, score, patch in zip(track_ids, frame_idx, kps, scores,
                                           patches):
        keypoint = Keypoint(kp, float(score))
        obs = Observation(int(fidx), views[int(fidx)].pose, keypoint,
                          Patch(size=size, channels=channels,
                                data=patch.astype(np.float64),
                                center_keypoint=keypoint))
        tracks.setdefault(int(tid), Track(id=int(tid), observations=[]))
        tracks[int(tid)].observations.append(obs)
    out = [tracks[tid] for tid in sorted(tracks)]
    for t in out:
        t.observations.sort(key=lambda o: o.frame_index)
    return out


def write_landmarks(landmarks, path) -> None:
    """Structured text: track_id, xyz, mean reprojection error per line."""
    with open(path, "w") as f:
        f.write("track_id x y z mean_reprojection_error\n")
        for lm in landmarks:
            x, y, z = lm.position
            f.write(f"{lm.track_id} {fnum(x)} {fnum(y)} {fnum(z)} "
                    f"{fnum(lm.mean_reprojection_error)}\n")


def read_landmarks(path):
    from .triangulation import Landmark

    out = []
    lines = Path(path).read_text().splitlines()
    for line in lines[1:]:
        parts = line.split()
        if not parts:
            continue
        out.append(Landmark(
            position=np.array([float(parts[1]), float(parts[2]),
                               float(parts[3])]),
            track_id=int(parts[0]),
            mean_reprojection_error=float(parts[4])))
    return out
