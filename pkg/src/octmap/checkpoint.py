"""Versioned binary checkpoints for the submap atlas.

Layout: an 8-byte magic, a u32 format version, config and scene hash
digests, the keyframe pose table, then one chunk per submap (anchor id
and pose, member relative poses, per-level octree node tables, corner
tables with raw float64 features, and both decoder weight sets).  All
integers and floats are little-endian; arrays are stored as raw bytes,
so a save/load round trip reproduces renders bit for bit.  Rotations
are stored as full matrices for that reason (quaternion encoding would
re-round them); the TUM-style trajectory text files keep quaternions
for interoperability.
"""

from __future__ import annotations

import struct

import numpy as np

from .geometry import Pose
from .octree import OctreeFeatureGrid
from .submaps import Submap, SubmapAtlas, SubmapConfig

MAGIC = b"OMAPCKPT"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


def _w_u32(f, v):
    f.write(struct.pack("<I", v))


def _w_u64(f, v):
    f.write(struct.pack("<Q", v))


def _w_f64(f, v):
    f.write(struct.pack("<d", v))


def _w_bytes(f, b: bytes):
    _w_u64(f, len(b))
    f.write(b)


def _w_array(f, arr: np.ndarray, dtype):
    a = np.ascontiguousarray(arr.astype(dtype, copy=False))
    _w_u32(f, a.ndim)
    for s in a.shape:
        _w_u64(f, s)
    f.write(a.tobytes())


def _w_pose(f, pose: Pose):
    _w_array(f, pose.rotation, "<f8")
    _w_array(f, pose.translation, "<f8")


class _Reader:
    def __init__(self, f):
        self.f = f

    def u32(self):
        return struct.unpack("<I", self._take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self._take(8))[0]

    def f64(self):
        return struct.unpack("<d", self._take(8))[0]

    def bytes_(self):
        return self._take(self.u64())

    def array(self, dtype):
        ndim = self.u32()
        shape = tuple(self.u64() for _ in range(ndim))
        dt = np.dtype(dtype)
        n = int(np.prod(shape)) if shape else 1
        data = self._take(n * dt.itemsize)
        return np.frombuffer(data, dtype=dt).reshape(shape).copy()

    def pose(self):
        return Pose(self.array("<f8"), self.array("<f8"))

    def _take(self, n):
        b = self.f.read(n)
        if len(b) != n:
            raise CheckpointError("truncated checkpoint")
        return b


def save_checkpoint(path, atlas: SubmapAtlas, pose_table: dict,
                    config_hash: str, scene_hash: str,
                    timestamps: dict | None = None):
    """``pose_table`` maps keyframe id -> Pose (current estimates)."""
    timestamps = timestamps or {}
    with open(path, "wb") as f:
        f.write(MAGIC)
        _w_u32(f, FORMAT_VERSION)
        _w_bytes(f, config_hash.encode())
        _w_bytes(f, scene_hash.encode())
        _w_array(f, atlas.background, "<f8")
        _w_u32(f, len(pose_table))
        for kf_id in sorted(pose_table):
            _w_u32(f, kf_id)
            _w_f64(f, float(timestamps.get(kf_id, 0.0)))
            _w_pose(f, pose_table[kf_id])
        _w_u32(f, len(atlas.submaps))
        for sm in atlas.submaps:
            _save_submap(f, sm)


def _save_submap(f, sm: Submap):
    _w_u32(f, sm.id)
    _w_u32(f, sm.anchor_kf_id)
    _w_pose(f, sm.anchor_pose)
    _w_u32(f, len(sm.trained_rel))
    for kf_id in sorted(sm.trained_rel):
        _w_u32(f, kf_id)
        _w_pose(f, sm.trained_rel[kf_id])
    grid = sm.grid
    state = grid.state_arrays()
    _w_array(f, state["origin"], "<f8")
    _w_f64(f, state["size"])
    _w_u32(f, state["max_depth"])
    _w_u32(f, state["feature_dim"])
    _w_u32(f, len(state["active_levels"]))
    for lv in state["active_levels"]:
        _w_u32(f, lv)
    for level in range(grid.max_depth + 1):
        _w_array(f, state["nodes"][level], "<u8")
    for level in grid.active_levels:
        _w_array(f, state["corners"][level], "<u8")
        _w_array(f, state["corner_slots"][level], "<i8")
        _w_array(f, state["features"][level], "<f8")
    for dec in (sm.field.occ_decoder, sm.field.color_decoder):
        _w_u32(f, len(dec.params()))
        for p in dec.params():
            _w_array(f, p, "<f8")


def load_checkpoint(path, cfg_submaps: SubmapConfig,
                    expected_config_hash: str | None = None,
                    expected_scene_hash: str | None = None):
    """Returns (atlas, pose_table, timestamps, config_hash, scene_hash)."""
    with open(path, "rb") as f:
        head = f.read(len(MAGIC))
        if head != MAGIC:
            raise CheckpointError("bad checkpoint magic")
        r = _Reader(f)
        version = r.u32()
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        config_hash = r.bytes_().decode()
        scene_hash = r.bytes_().decode()
        if expected_config_hash is not None and config_hash != expected_config_hash:
            raise CheckpointError("config hash mismatch")
        if expected_scene_hash is not None and scene_hash != expected_scene_hash:
            raise CheckpointError("scene hash mismatch")
        background = r.array("<f8")
        pose_table = {}
        timestamps = {}
        for _ in range(r.u32()):
            kf_id = r.u32()
            timestamps[kf_id] = r.f64()
            pose_table[kf_id] = r.pose()
        atlas = SubmapAtlas(cfg_submaps, background=tuple(background))
        n_submaps = r.u32()
        for _ in range(n_submaps):
            atlas.submaps.append(_load_submap(r, cfg_submaps))
        if atlas.submaps:
            atlas.active_submap_id = atlas.submaps[-1].id
    return atlas, pose_table, timestamps, config_hash, scene_hash


def _load_submap(r: _Reader, cfg: SubmapConfig) -> Submap:
    sm_id = r.u32()
    anchor_kf = r.u32()
    anchor_pose = r.pose()
    trained_rel = {}
    for _ in range(r.u32()):
        kf_id = r.u32()
        trained_rel[kf_id] = r.pose()
    origin = r.array("<f8")
    size = r.f64()
    max_depth = r.u32()
    feature_dim = r.u32()
    active_levels = tuple(r.u32() for _ in range(r.u32()))
    state = {
        "origin": origin,
        "size": size,
        "max_depth": max_depth,
        "feature_dim": feature_dim,
        "active_levels": active_levels,
        "nodes": {},
        "corners": {},
        "corner_slots": {},
        "features": {},
    }
    for level in range(max_depth + 1):
        state["nodes"][level] = r.array("<u8")
    for level in active_levels:
        state["corners"][level] = r.array("<u8")
        state["corner_slots"][level] = r.array("<i8")
        state["features"][level] = r.array("<f8")
    sm = Submap(sm_id, anchor_kf, anchor_pose, cfg, np.random.default_rng(0))
    sm.field.rebind_grid(OctreeFeatureGrid.from_state(state))
    sm.trained_rel = trained_rel
    for dec in (sm.field.occ_decoder, sm.field.color_decoder):
        n = r.u32()
        dec.set_params([r.array("<f8") for _ in range(n)])
    return sm
