"""Bit-exact persistence of voxel maps.

FVOR binary layout (little-endian):

    magic   "FVOR" (4 bytes)
    header  u32 version, u32 voxel_count, u32 channels, u32 resolution,
            u32 patch_size, 6 x f64 intrinsics (fx, fy, cx, cy, width, height)
    voxels  per voxel: u64 track_id, 3 x f64 center, f64 side,
            R^3*C x f32 descriptor nodes, R^3 x f32 density nodes (C order)

Lattices are float64 in memory but float32 on disk; saving an
already-loaded map reproduces the byte stream exactly.
"""

from __future__ import annotations

import struct

import numpy as np

from .exceptions import BadMagic, CorruptPayload, IoFailure, VersionMismatch
from .geometry import CameraIntrinsics
from .voxel import VoxelLandmark, VoxelMap

MAGIC = b"FVOR"
VERSION = 1

_HEADER = struct.Struct("<IIIII6d")
_VOXEL_FIXED = struct.Struct("<Q3dd")


def header_size() -> int:
    return len(MAGIC) + _HEADER.size


def voxel_record_size(resolution: int, channels: int) -> int:
    nodes = resolution ** 3
    return _VOXEL_FIXED.size + 4 * nodes * channels + 4 * nodes


def file_size(voxel_count: int, resolution: int, channels: int) -> int:
    """Analytic serialized size in bytes."""
    return header_size() + voxel_count * voxel_record_size(resolution, channels)


def save_map(vmap: VoxelMap, path) -> int:
    """Serialize a map; returns the number of bytes written."""
    resolution = vmap.voxels[0].resolution if vmap.voxels else 0
    intr = vmap.intrinsics
    chunks = [
        MAGIC,
        _HEADER.pack(VERSION, len(vmap.voxels), vmap.channels, resolution,
                     vmap.patch_size, intr.fx, intr.fy, intr.cx, intr.cy,
                     float(intr.width), float(intr.height)),
    ]
    for v in vmap.voxels:
        if v.resolution != resolution:
            raise ValueError("all voxels must share one lattice resolution")
        chunks.append(_VOXEL_FIXED.pack(v.track_id, *v.center, v.side))
        chunks.append(v.desc_nodes.astype("<f4").tobytes(order="C"))
        chunks.append(v.density_nodes.astype("<f4").tobytes(order="C"))
    blob = b"".join(chunks)
    try:
        with open(path, "wb") as f:
            f.write(blob)
    except OSError as e:
        raise IoFailure(str(e)) from e
    return len(blob)


def load_map(path) -> VoxelMap:
    """Deserialize a map, validating magic, version, sizes, and finiteness."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise IoFailure(str(e)) from e

    if raw[:4] != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, got {raw[:4]!r}")
    if len(raw) < header_size():
        raise CorruptPayload("truncated header")
    (version, count, channels, resolution, patch_size,
     fx, fy, cx, cy, width, height) = _HEADER.unpack_from(raw, 4)
    if version != VERSION:
        raise VersionMismatch(f"unsupported version {version}")
    expected = file_size(count, resolution, channels)
    if len(raw) != expected:
        raise CorruptPayload(f"file size {len(raw)} != expected {expected}")

    try:
        intr = CameraIntrinsics(fx, fy, cx, cy, int(round(width)),
                                int(round(height)))
    except ValueError as e:
        raise CorruptPayload(f"bad intrinsics: {e}") from e

    voxels = []
    offset = header_size()
    nodes = resolution ** 3
    for _ in range(count):
        track_id, cx0, cy0, cz0, side = _VOXEL_FIXED.unpack_from(raw, offset)
        offset += _VOXEL_FIXED.size
        desc = np.frombuffer(raw, dtype="<f4", count=nodes * channels,
                             offset=offset).astype(np.float64)
        offset += 4 * nodes * channels
        density = np.frombuffer(raw, dtype="<f4", count=nodes,
                                offset=offset).astype(np.float64)
        offset += 4 * nodes
        if not (np.all(np.isfinite(desc)) and np.all(np.isfinite(density))):
            raise CorruptPayload("non-finite lattice values")
        try:
            voxels.append(VoxelLandmark(
                center=np.array([cx0, cy0, cz0]),
                side=side,
                resolution=resolution,
                desc_nodes=desc.reshape(resolution, resolution, resolution,
                                        channels),
                density_nodes=density.reshape(resolution, resolution,
                                              resolution),
                track_id=track_id,
            ))
        except ValueError as e:
            raise CorruptPayload(str(e)) from e
    return VoxelMap(voxels=voxels, intrinsics=intr, channels=channels,
                    patch_size=patch_size, extractor="unknown")
