"""Incremental sparse voxel octree with multi-level corner features.

The tree is stored as a linear octree: one Morton-keyed node table per
level, kept as append-only numpy arrays with a lazily rebuilt sorted
index, so membership tests and node lookups are vectorized searchsorted
calls.  Feature vectors live on node *corners* of the active levels and
are shared between neighboring nodes through a corner-key table, so
interpolation is continuous across voxel faces.

Structural growth (``insert_points``) requires exclusive access;
interpolation, gradient scatter and ray queries only read structure and
may run concurrently against a frozen tree.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Ray

try:  # jit kernels for the per-sample hot paths; numpy fallback below
    import numba

    @numba.njit(cache=True, fastmath=False)
    def _gather_weighted(feats, slots, weights, out):
        m, fdim = out.shape
        for i in range(m):
            for j in range(8):
                s = slots[i, j]
                w = weights[i, j]
                for f in range(fdim):
                    out[i, f] += w * feats[s, f]

    @numba.njit(cache=True, fastmath=False)
    def _scatter_weighted(buf, slots, weights, grads):
        m, fdim = grads.shape
        for i in range(m):
            for j in range(8):
                s = slots[i, j]
                w = weights[i, j]
                for f in range(fdim):
                    buf[s, f] += w * grads[i, f]

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised on numba-less installs
    _HAVE_NUMBA = False

_U = np.uint64
_MAX_COORD = 1 << 21

# bit-spreading magic for 21-bit 3D Morton codes
_SPREAD_MASKS = (
    (32, 0x1F00000000FFFF),
    (16, 0x1F0000FF0000FF),
    (8, 0x100F00F00F00F00F),
    (4, 0x10C30C30C30C30C3),
    (2, 0x1249249249249249),
)

# corner j of a node at cell c covers c + _CORNER_OFFSETS[j]
_CORNER_OFFSETS = np.array(
    [[(j >> 0) & 1, (j >> 1) & 1, (j >> 2) & 1] for j in range(8)], dtype=np.int64
)


def _spread_bits(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.uint64) & _U(0x1FFFFF)
    for shift, mask in _SPREAD_MASKS:
        x = (x | (x << _U(shift))) & _U(mask)
    return x


_COMPACT_MASKS = (
    (2, 0x10C30C30C30C30C3),
    (4, 0x100F00F00F00F00F),
    (8, 0x1F0000FF0000FF),
    (16, 0x1F00000000FFFF),
    (32, 0x1FFFFF),
)


def _compact_bits(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.uint64) & _U(0x1249249249249249)
    for shift, mask in _COMPACT_MASKS:
        x = (x | (x >> _U(shift))) & _U(mask)
    return x


def morton_encode(x: int, y: int, z: int) -> int:
    """Interleave grid coordinates, x in the lowest bit."""
    for c in (x, y, z):
        if not 0 <= c < _MAX_COORD:
            raise ValueError(f"coordinate {c} outside [0, 2^21)")
    arr = np.array([x, y, z], dtype=np.uint64)
    s = _spread_bits(arr)
    return int(s[0] | (s[1] << _U(1)) | (s[2] << _U(2)))


def morton_decode(code: int) -> tuple[int, int, int]:
    c = np.array([code], dtype=np.uint64)
    x = _compact_bits(c)
    y = _compact_bits(c >> _U(1))
    z = _compact_bits(c >> _U(2))
    return int(x[0]), int(y[0]), int(z[0])


def morton_encode_many(cells: np.ndarray) -> np.ndarray:
    """Vectorized encode of (n, 3) non-negative integer cells."""
    cells = np.asarray(cells)
    if cells.size and (cells.min() < 0 or cells.max() >= _MAX_COORD):
        raise ValueError("cell coordinate outside [0, 2^21)")
    s = _spread_bits(cells.astype(np.uint64))
    return s[:, 0] | (s[:, 1] << _U(1)) | (s[:, 2] << _U(2))


def morton_decode_many(codes: np.ndarray) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.uint64)
    out = np.empty((codes.shape[0], 3), dtype=np.int64)
    out[:, 0] = _compact_bits(codes).astype(np.int64)
    out[:, 1] = _compact_bits(codes >> _U(1)).astype(np.int64)
    out[:, 2] = _compact_bits(codes >> _U(2)).astype(np.int64)
    return out


@dataclass(frozen=True)
class MortonCode:
    code: int
    level: int

    def __post_init__(self):
        if self.level < 0 or self.code < 0 or self.code >= 8**self.level:
            raise ValueError("morton code out of range for level")


class _KeySet:
    """Append-only set of uint64 keys with a lazily sorted lookup index.

    Insertion order is preserved; ``index_of`` maps keys to their
    insertion index (the row id of any per-key side arrays).
    """

    def __init__(self):
        self.keys = np.empty(64, dtype=np.uint64)
        self.count = 0
        self._sorted: np.ndarray | None = None
        self._order: np.ndarray | None = None

    def _grow(self, extra: int):
        need = self.count + extra
        if need > self.keys.shape[0]:
            cap = max(need, 2 * self.keys.shape[0])
            new = np.empty(cap, dtype=np.uint64)
            new[: self.count] = self.keys[: self.count]
            self.keys = new

    def _ensure_index(self):
        if self._sorted is None:
            active = self.keys[: self.count]
            self._order = np.argsort(active, kind="stable")
            self._sorted = active[self._order]

    def add_new(self, candidates: np.ndarray) -> np.ndarray:
        """Append candidates not already present; returns the new keys.

        ``candidates`` must be duplicate-free.
        """
        fresh = candidates[~self.contains(candidates)]
        if fresh.size:
            self._grow(fresh.size)
            self.keys[self.count : self.count + fresh.size] = fresh
            self.count += fresh.size
            self._sorted = None
            self._order = None
        return fresh

    def contains(self, queries: np.ndarray) -> np.ndarray:
        if self.count == 0:
            return np.zeros(queries.shape[0], dtype=bool)
        self._ensure_index()
        pos = np.searchsorted(self._sorted, queries)
        pos = np.minimum(pos, self.count - 1)
        return self._sorted[pos] == queries

    def index_of(self, queries: np.ndarray) -> np.ndarray:
        """Insertion indices; -1 where a key is absent."""
        if self.count == 0:
            return np.full(queries.shape[0], -1, dtype=np.int64)
        self._ensure_index()
        pos = np.searchsorted(self._sorted, queries)
        pos = np.minimum(pos, self.count - 1)
        found = self._sorted[pos] == queries
        idx = np.where(found, self._order[pos], -1)
        return idx.astype(np.int64)

    def values(self) -> np.ndarray:
        return self.keys[: self.count]


@dataclass
class InsertResult:
    new_nodes: int
    dropped_points: int


@dataclass
class InterpRecord:
    """Contributing slots and weights of a batched interpolation query.

    Per active level: ``slots[level]`` (n, 8) int64 with -1 rows where
    the level's node is unallocated, and ``weights[level]`` (n, 8).
    """

    structure_version: int
    levels: tuple[int, ...]
    slots: dict[int, np.ndarray]
    weights: dict[int, np.ndarray]
    found: dict[int, np.ndarray]

    @property
    def n_points(self) -> int:
        lv = self.levels[0]
        return self.slots[lv].shape[0]

    def observed_mask(self) -> np.ndarray:
        """True where at least one active level contributed."""
        m = np.zeros(self.n_points, dtype=bool)
        for lv in self.levels:
            m |= self.found[lv]
        return m

    def fully_observed_mask(self) -> np.ndarray:
        m = np.ones(self.n_points, dtype=bool)
        for lv in self.levels:
            m &= self.found[lv]
        return m


@dataclass
class VoxelHit:
    cell: tuple[int, int, int]
    morton: int
    t_entry: float
    t_exit: float


class OctreeFeatureGrid:
    """Sparse octree over a cube, corner features on the active levels."""

    def __init__(
        self,
        origin,
        size: float,
        max_depth: int = 8,
        feature_dim: int = 16,
        active_levels: tuple[int, ...] | None = None,
        init_scale: float = 1e-2,
        rng: np.random.Generator | None = None,
    ):
        if max_depth < 1 or max_depth > 20:
            raise ValueError("max_depth must be in [1, 20]")
        self.origin = np.asarray(origin, dtype=np.float64).reshape(3)
        self.size = float(size)
        self.max_depth = int(max_depth)
        self.feature_dim = int(feature_dim)
        if active_levels is None:
            active_levels = tuple(
                sorted({max(1, max_depth - 1), max_depth})
            )
        self.active_levels = tuple(sorted(int(l) for l in active_levels))
        if any(l < 0 or l > max_depth for l in self.active_levels):
            raise ValueError("active level outside [0, max_depth]")
        self.init_scale = float(init_scale)
        self.rng = rng if rng is not None else np.random.default_rng(0)

        self.nodes: dict[int, _KeySet] = {l: _KeySet() for l in range(max_depth + 1)}
        # per active level: corner key set, node->corner-slot map, features
        self.corners: dict[int, _KeySet] = {l: _KeySet() for l in self.active_levels}
        self.corner_slots: dict[int, np.ndarray] = {
            l: np.empty((64, 8), dtype=np.int64) for l in self.active_levels
        }
        self.features: dict[int, np.ndarray] = {
            l: np.empty((64, feature_dim), dtype=np.float64) for l in self.active_levels
        }
        self.grads: dict[int, np.ndarray] = {
            l: np.zeros((64, feature_dim), dtype=np.float64) for l in self.active_levels
        }
        self.structure_version = 0
        # allocated leaf-cell bounding box (inclusive), for frustum tests
        self._leaf_lo = np.full(3, np.iinfo(np.int64).max, dtype=np.int64)
        self._leaf_hi = np.full(3, -1, dtype=np.int64)

    # -- basic queries -------------------------------------------------------

    def cell_size(self, level: int) -> float:
        return self.size / (1 << level)

    @property
    def leaf_size(self) -> float:
        return self.cell_size(self.max_depth)

    def node_count(self, level: int | None = None) -> int:
        if level is not None:
            return self.nodes[level].count
        return sum(ks.count for ks in self.nodes.values())

    def feature_count(self, level: int) -> int:
        return self.corners[level].count

    def contains_points(self, points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        rel = p - self.origin
        return np.all((rel >= 0) & (rel <= self.size), axis=1)

    def _cells_at(self, points: np.ndarray, level: int) -> np.ndarray:
        h = self.cell_size(level)
        c = np.floor((points - self.origin) / h).astype(np.int64)
        return np.clip(c, 0, (1 << level) - 1)

    def leaf_occupied(self, points: np.ndarray) -> np.ndarray:
        """True where the containing leaf voxel is allocated."""
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        inside = self.contains_points(p)
        out = np.zeros(p.shape[0], dtype=bool)
        if inside.any():
            cells = self._cells_at(p[inside], self.max_depth)
            out[inside] = self.nodes[self.max_depth].contains(morton_encode_many(cells))
        return out

    def allocated_leaf_bounds(self) -> tuple[np.ndarray, np.ndarray] | None:
        """AABB of allocated leaf voxels in local meters, or None if empty."""
        if self._leaf_hi[0] < 0:
            return None
        h = self.leaf_size
        return (
            self.origin + self._leaf_lo * h,
            self.origin + (self._leaf_hi + 1) * h,
        )

    # -- growth ---------------------------------------------------------------

    def insert_points(self, points: np.ndarray) -> InsertResult:
        """Allocate the root-to-leaf path of every in-extent point.

        Out-of-extent points are skipped and counted.  Repeated points
        are idempotent.  Newly created corner features are initialized
        uniformly in [-init_scale, init_scale].
        """
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        inside = self.contains_points(p)
        dropped = int(p.shape[0] - inside.sum())
        p = p[inside]
        if p.shape[0] == 0:
            return InsertResult(0, dropped)

        leaf_cells = self._cells_at(p, self.max_depth)
        new_nodes = 0
        for level in range(self.max_depth + 1):
            cells = leaf_cells >> (self.max_depth - level)
            codes = np.unique(morton_encode_many(cells))
            fresh = self.nodes[level].add_new(codes)
            new_nodes += fresh.size
            if fresh.size and level in self.active_levels:
                self._allocate_corners(level, fresh)
            if fresh.size and level == self.max_depth:
                fc = morton_decode_many(fresh)
                self._leaf_lo = np.minimum(self._leaf_lo, fc.min(axis=0))
                self._leaf_hi = np.maximum(self._leaf_hi, fc.max(axis=0))
        if new_nodes:
            self.structure_version += 1
        return InsertResult(new_nodes, dropped)

    def _allocate_corners(self, level: int, fresh_codes: np.ndarray):
        node_idx = self.nodes[level].index_of(fresh_codes)
        cells = morton_decode_many(fresh_codes)
        corner_cells = cells[:, None, :] + _CORNER_OFFSETS[None, :, :]
        corner_codes = morton_encode_many(corner_cells.reshape(-1, 3))
        keyset = self.corners[level]
        new_corners = keyset.add_new(np.unique(corner_codes))
        if new_corners.size:
            # add_new appends in argument order, so rows n_old..count line up
            n_old = keyset.count - new_corners.size
            self._grow_feature_rows(level, keyset.count)
            self.features[level][n_old : keyset.count] = self.rng.uniform(
                -self.init_scale, self.init_scale, (new_corners.size, self.feature_dim)
            )
        slots = keyset.index_of(corner_codes).reshape(-1, 8)
        self._grow_slot_rows(level, int(node_idx.max()) + 1)
        self.corner_slots[level][node_idx] = slots

    def _grow_feature_rows(self, level: int, need: int):
        feats = self.features[level]
        if need > feats.shape[0]:
            cap = max(need, 2 * feats.shape[0])
            for name in ("features", "grads"):
                arr = getattr(self, name)[level]
                new = np.zeros((cap, self.feature_dim), dtype=np.float64)
                new[: arr.shape[0]] = arr
                getattr(self, name)[level] = new

    def _grow_slot_rows(self, level: int, need: int):
        slots = self.corner_slots[level]
        if need > slots.shape[0]:
            cap = max(need, 2 * slots.shape[0])
            new = np.full((cap, 8), -1, dtype=np.int64)
            new[: slots.shape[0]] = slots
            self.corner_slots[level] = new

    # -- interpolation ---------------------------------------------------------

    def interpolate_many(self, points: np.ndarray) -> tuple[np.ndarray, InterpRecord]:
        """Summed multi-level trilinear features of in-extent points.

        Unallocated levels contribute zero; the record flags them so
        callers can distinguish partially and fully unobserved queries.
        """
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if not self.contains_points(p).all():
            raise ValueError("interpolation query outside the grid extent")
        n = p.shape[0]
        total = np.zeros((n, self.feature_dim))
        slots_d, weights_d, found_d = {}, {}, {}
        for level in self.active_levels:
            h = self.cell_size(level)
            cells = self._cells_at(p, level)
            local = (p - self.origin) / h - cells
            codes = morton_encode_many(cells)
            node_idx = self.nodes[level].index_of(codes)
            found = node_idx >= 0
            w = self._trilinear_weights(local)
            slots = np.full((n, 8), -1, dtype=np.int64)
            if found.any():
                slots[found] = self.corner_slots[level][node_idx[found]]
                feats = self.features[level]
                fslots = slots[found]
                fw = w[found]
                acc = np.zeros((fslots.shape[0], self.feature_dim))
                if _HAVE_NUMBA:
                    _gather_weighted(feats, fslots, fw, acc)
                else:
                    for j in range(8):
                        acc += fw[:, j : j + 1] * feats[fslots[:, j]]
                total[found] += acc
            slots_d[level] = slots
            weights_d[level] = w
            found_d[level] = found
        rec = InterpRecord(
            self.structure_version, self.active_levels, slots_d, weights_d, found_d
        )
        return total, rec

    def interpolate(self, point) -> tuple[np.ndarray, InterpRecord]:
        feats, rec = self.interpolate_many(np.asarray(point).reshape(1, 3))
        return feats[0], rec

    @staticmethod
    def _trilinear_weights(local: np.ndarray) -> np.ndarray:
        """(n, 8) weights matching the _CORNER_OFFSETS ordering."""
        u = local
        w = np.ones((local.shape[0], 8))
        for j in range(8):
            for axis in range(3):
                w[:, j] *= u[:, axis] if _CORNER_OFFSETS[j, axis] else 1.0 - u[:, axis]
        return w

    # -- gradient scatter -------------------------------------------------------

    def scatter_gradient(self, record: InterpRecord, grad: np.ndarray):
        """Accumulate d(loss)/d(feature) into the per-corner buffers.

        ``grad`` is (n, F) aligned with the record's query points (or
        (F,) for a single-point record).  The adjoint of interpolation:
        each contributing corner receives weight * grad.
        """
        if record.structure_version != self.structure_version:
            raise ValueError("stale interpolation record: grid was modified")
        g = np.atleast_2d(np.asarray(grad, dtype=np.float64))
        if g.shape != (record.n_points, self.feature_dim):
            raise ValueError("gradient shape does not match the record")
        for level in record.levels:
            found = record.found[level]
            if not found.any():
                continue
            rows = record.slots[level][found]      # (m, 8)
            w = record.weights[level][found]       # (m, 8)
            gf = np.ascontiguousarray(g[found])
            buf = self.grads[level]
            if _HAVE_NUMBA:
                _scatter_weighted(buf, rows, w, gf)
            else:
                for j in range(8):
                    np.add.at(buf, rows[:, j], w[:, j : j + 1] * gf)

    def touched_gradients(self) -> dict[int, tuple[np.ndarray, np.ndarray]]:
        """Nonzero gradient rows per level as (row indices, gradients)."""
        out = {}
        for level in self.active_levels:
            g = self.grads[level][: self.corners[level].count]
            rows = np.nonzero(np.any(g != 0.0, axis=1))[0]
            out[level] = (rows, g[rows].copy())
        return out

    def zero_gradients(self):
        for level in self.active_levels:
            self.grads[level][: self.corners[level].count] = 0.0

    # -- ray queries -------------------------------------------------------------

    def intersect_rays(self, origins: np.ndarray, dirs: np.ndarray, t_min=0.0,
                       t_max=np.inf, max_per_ray: int = 0):
        """Allocated leaf-voxel intervals of a ray batch.

        Returns flat arrays (ray_index, t_entry, t_exit, leaf_code)
        ordered by ray and then by t_entry.  ``max_per_ray`` > 0 keeps
        only the nearest intervals of each ray (a training-time budget;
        evaluation renders leave it off).
        """
        o = np.atleast_2d(np.asarray(origins, dtype=np.float64))
        d = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
        n = o.shape[0]
        res = 1 << self.max_depth
        h = self.leaf_size
        empty = (
            np.empty(0, dtype=np.int64),
            np.empty(0),
            np.empty(0),
            np.empty(0, dtype=np.uint64),
        )
        if n == 0 or self.nodes[self.max_depth].count == 0:
            return empty

        with np.errstate(divide="ignore", invalid="ignore"):
            inv = np.where(d != 0.0, 1.0 / d, np.inf)
            t0 = (self.origin - o) * inv
            t1 = (self.origin + self.size - o) * inv
        lo = np.minimum(t0, t1)
        hi = np.maximum(t0, t1)
        # rays parallel to an axis outside that slab never hit
        off_axis = (d == 0.0) & (
            (o < self.origin) | (o > self.origin + self.size)
        )
        lo = np.where(np.isnan(lo), -np.inf, lo)
        hi = np.where(np.isnan(hi), np.inf, hi)
        ta = np.maximum(lo.max(axis=1), t_min)
        tb = np.minimum(hi.min(axis=1), t_max)
        hit = (tb > ta + 1e-12) & ~off_axis.any(axis=1)
        if not hit.any():
            return empty

        o, d, ta, tb = o[hit], d[hit], ta[hit], tb[hit]
        ray_ids = np.nonzero(hit)[0]
        m = o.shape[0]
        eps = 1e-9
        # entry/exit cells per axis bound the number of plane crossings
        pa = o + ta[:, None] * d
        pb = o + tb[:, None] * d
        ca = np.clip(np.floor((pa - self.origin) / h), 0, res - 1).astype(np.int64)
        cb = np.clip(np.floor((pb - self.origin) / h), 0, res - 1).astype(np.int64)
        spans = np.abs(cb - ca)
        chunks = [ta[:, None], tb[:, None]]
        for axis in range(3):
            k_max = int(spans[:, axis].max())
            if k_max == 0:
                continue
            steps = np.arange(1, k_max + 1)
            sgn = np.sign(d[:, axis]).astype(np.int64)
            first = np.where(sgn >= 0, ca[:, axis] + 1, ca[:, axis])
            planes = self.origin[axis] + h * (
                first[:, None] + sgn[:, None] * (steps[None, :] - 1)
            )
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (planes - o[:, axis : axis + 1]) / d[:, axis : axis + 1]
            t = np.where(steps[None, :] <= spans[:, axis : axis + 1], t, np.inf)
            chunks.append(t)
        tgrid = np.concatenate(chunks, axis=1)
        tgrid = np.where((tgrid < ta[:, None] - eps) | (tgrid > tb[:, None] + eps), np.inf, tgrid)
        tgrid.sort(axis=1)

        te = tgrid[:, :-1]
        tx = tgrid[:, 1:]
        with np.errstate(invalid="ignore"):
            valid = np.isfinite(tx) & (tx - te > 1e-12)
        ridx, cidx = np.nonzero(valid)
        te, tx = te[valid], tx[valid]
        mid = o[ridx] + (0.5 * (te + tx))[:, None] * d[ridx]
        cells = np.clip(np.floor((mid - self.origin) / h), 0, res - 1).astype(np.int64)
        codes = morton_encode_many(cells)
        alloc = self.nodes[self.max_depth].contains(codes)
        if not alloc.any():
            return empty
        out_ray = ray_ids[ridx[alloc]]
        out_te, out_tx, out_codes = te[alloc], tx[alloc], codes[alloc]
        if max_per_ray > 0 and out_ray.size:
            # rank of each interval within its (already sorted) ray
            change = np.concatenate([[True], out_ray[1:] != out_ray[:-1]])
            starts = np.nonzero(change)[0]
            rank = np.arange(out_ray.size) - np.repeat(
                starts, np.diff(np.append(starts, out_ray.size))
            )
            keep = rank < max_per_ray
            return (out_ray[keep], out_te[keep], out_tx[keep], out_codes[keep])
        return (out_ray, out_te, out_tx, out_codes)

    def ray_voxel_intersections(self, ray: Ray, t_min=0.0, t_max=np.inf) -> list[VoxelHit]:
        """Ordered allocated leaf voxels pierced by one ray."""
        _, te, tx, codes = self.intersect_rays(
            ray.origin[None, :], ray.direction[None, :], t_min, t_max
        )
        return [
            VoxelHit(morton_decode(int(c)), int(c), float(a), float(b))
            for a, b, c in zip(te, tx, codes)
        ]

    # -- persistence ---------------------------------------------------------------

    def state_arrays(self) -> dict:
        """Plain-array snapshot (shared memory where possible)."""
        state = {
            "origin": self.origin,
            "size": self.size,
            "max_depth": self.max_depth,
            "feature_dim": self.feature_dim,
            "active_levels": self.active_levels,
            "nodes": {l: self.nodes[l].values() for l in range(self.max_depth + 1)},
            "corners": {l: self.corners[l].values() for l in self.active_levels},
            "corner_slots": {
                l: self.corner_slots[l][: self.nodes[l].count]
                for l in self.active_levels
            },
            "features": {
                l: self.features[l][: self.corners[l].count]
                for l in self.active_levels
            },
        }
        return state

    @staticmethod
    def from_state(state: dict, rng: np.random.Generator | None = None) -> "OctreeFeatureGrid":
        grid = OctreeFeatureGrid(
            state["origin"],
            state["size"],
            max_depth=state["max_depth"],
            feature_dim=state["feature_dim"],
            active_levels=tuple(state["active_levels"]),
            rng=rng,
        )
        for level, codes in state["nodes"].items():
            codes = np.asarray(codes, dtype=np.uint64)
            grid.nodes[level].add_new(codes)
            if level == grid.max_depth and codes.size:
                cells = morton_decode_many(codes)
                grid._leaf_lo = cells.min(axis=0)
                grid._leaf_hi = cells.max(axis=0)
        for level in grid.active_levels:
            corner_codes = np.asarray(state["corners"][level], dtype=np.uint64)
            grid.corners[level].add_new(corner_codes)
            n_nodes = grid.nodes[level].count
            grid._grow_slot_rows(level, n_nodes)
            grid.corner_slots[level][:n_nodes] = state["corner_slots"][level]
            grid._grow_feature_rows(level, corner_codes.size)
            grid.features[level][: corner_codes.size] = state["features"][level]
        grid.structure_version = 1 if grid.node_count() else 0
        return grid
