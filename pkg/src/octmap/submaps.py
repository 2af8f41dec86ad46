"""Multi-submap atlas: selection, loop correction, fused rendering.

Each submap owns an octree feature grid and two decoders expressed in
its anchor keyframe's camera frame; moving the anchor pose rigidly
moves the whole submap without touching a single parameter.  Keyframes
are assigned by co-visibility (fraction of back-projected depth points
landing in allocated leaf voxels), loop closure is answered in two
stages (rigid anchor adjustment, then selective fine-tuning), and novel
views are fused per pixel from the submap with the lowest rendered
occupancy variance.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .geometry import (
    Intrinsics,
    KeyframePacket,
    Pose,
    back_project_depth_image,
    compose,
    pose_delta,
)
from .octree import OctreeFeatureGrid
from .render import (
    LossReport,
    NeuralField,
    UNOBSERVED_VARIANCE,
    render_view,
    train_step,
)


@dataclass
class SubmapConfig:
    extent: float = 6.4
    forward_offset: float = 1.6  # cube center along the anchor view axis
    max_depth: int = 7
    feature_dim: int = 16
    active_levels: int = 2
    hidden_dim: int = 32
    lr_features: float = 1e-2
    lr_decoders: float = 1e-3
    n_point: int = 10
    photometric_weight: float = 1.0
    covis_threshold: float = 0.85
    covis_stride: int = 4
    finetune_translation: float = 0.01
    finetune_rotation: float = np.deg2rad(0.5)
    replay_keyframes: int = 2
    # training-time budget of allocated voxels sampled per ray (0: all);
    # bounds the cost of grazing rays without touching eval renders
    max_voxels_per_ray: int = 0
    insert_stride: int = 1
    # dilate inserted surface points by this many leaf voxels so the
    # allocated shell stays contiguous when the pixel footprint on the
    # surface exceeds the leaf size
    insert_dilation: int = 1


class Submap:
    """One anchored neural field plus its member keyframes."""

    def __init__(self, submap_id: int, anchor_kf_id: int, anchor_pose: Pose,
                 cfg: SubmapConfig, rng: np.random.Generator):
        self.id = submap_id
        self.anchor_kf_id = anchor_kf_id
        self.anchor_pose = anchor_pose
        self.cfg = cfg
        levels = tuple(
            range(max(1, cfg.max_depth - cfg.active_levels + 1), cfg.max_depth + 1)
        )
        # cube centered ahead of the anchor camera (it looks along +z)
        origin = np.array([
            -cfg.extent / 2.0, -cfg.extent / 2.0,
            cfg.forward_offset - cfg.extent / 2.0,
        ])
        grid = OctreeFeatureGrid(
            origin=origin,
            size=cfg.extent,
            max_depth=cfg.max_depth,
            feature_dim=cfg.feature_dim,
            active_levels=levels,
            rng=rng,
        )
        self.field = NeuralField(
            grid,
            hidden=cfg.hidden_dim,
            lr_features=cfg.lr_features,
            lr_decoders=cfg.lr_decoders,
            rng=rng,
        )
        self.members: dict[int, KeyframePacket] = {}
        # anchor-relative pose each member was last trained at
        self.trained_rel: dict[int, Pose] = {}
        self.train_seconds = 0.0

    @property
    def grid(self) -> OctreeFeatureGrid:
        return self.field.grid

    def to_local(self, world_pose: Pose) -> Pose:
        return compose(self.anchor_pose.inverse(), world_pose)

    def coverage_fraction(self, kf: KeyframePacket, stride: int = 4) -> float:
        """Fraction of the keyframe's depth points in allocated leaves."""
        depth = kf.depth[::stride, ::stride]
        if not (depth > 0).any():
            return 0.0
        intr = kf.intrinsics
        sub_intr = Intrinsics(
            intr.fx / stride, intr.fy / stride, intr.cx / stride, intr.cy / stride,
            depth.shape[1], depth.shape[0],
        )
        pts = back_project_depth_image(sub_intr, self.to_local(kf.pose), depth)
        if pts.shape[0] == 0:
            return 0.0
        return float(self.grid.leaf_occupied(pts).mean())

    def integrate_keyframe(self, kf: KeyframePacket):
        """Grow the octree with the keyframe's back-projected surface."""
        rel = self.to_local(kf.pose)
        depth = kf.depth
        intr = kf.intrinsics
        if self.cfg.insert_stride > 1:
            s = self.cfg.insert_stride
            depth = depth[::s, ::s]
            intr = Intrinsics(
                intr.fx / s, intr.fy / s, intr.cx / s, intr.cy / s,
                depth.shape[1], depth.shape[0],
            )
        pts = self._dilate(back_project_depth_image(intr, rel, depth))
        result = self.grid.insert_points(pts)
        self.members[kf.kf_id] = kf
        self.trained_rel[kf.kf_id] = rel
        return result

    def _dilate(self, pts: np.ndarray) -> np.ndarray:
        """Thicken the surface samples by ``insert_dilation`` leaf cells.

        Works on deduplicated leaf cells (not raw points) and returns
        cell-center points, so the cost scales with touched cells.
        """
        r = self.cfg.insert_dilation
        if r <= 0 or pts.shape[0] == 0:
            return pts
        h = self.grid.leaf_size
        inside = self.grid.contains_points(pts)
        cells = np.unique(
            np.floor((pts[inside] - self.grid.origin) / h).astype(np.int64), axis=0
        )
        steps = np.arange(-r, r + 1)
        offsets = np.stack(
            np.meshgrid(steps, steps, steps, indexing="ij"), axis=-1
        ).reshape(-1, 3)
        dilated = (cells[:, None, :] + offsets[None, :, :]).reshape(-1, 3)
        res = 1 << self.grid.max_depth
        keep = np.all((dilated >= 0) & (dilated < res), axis=1)
        return self.grid.origin + (dilated[keep] + 0.5) * h

    def train(self, m_pixels: int, rng: np.random.Generator,
              iterations: int = 1, focus_kf_id: int | None = None) -> LossReport:
        """Train on the focus keyframe plus randomly replayed members.

        Random replay keeps earlier regions from being forgotten while
        the shared decoders track the newest keyframes.
        """
        ids = sorted(self.members)
        if not ids:
            raise ValueError("submap has no member keyframes")
        if focus_kf_id is None:
            focus_kf_id = ids[-1]
        report = None
        t0 = time.perf_counter()
        for _ in range(iterations):
            others = [i for i in ids if i != focus_kf_id]
            n_replay = min(self.cfg.replay_keyframes, len(others))
            picks = (
                list(rng.choice(others, size=n_replay, replace=False))
                if n_replay else []
            )
            kfs = [
                replace(self.members[i], pose=self.trained_rel[i])
                for i in [focus_kf_id] + picks
            ]
            report = train_step(
                self.field, kfs, m_pixels, rng,
                n_point=self.cfg.n_point,
                photometric_weight=self.cfg.photometric_weight,
                max_voxels_per_ray=self.cfg.max_voxels_per_ray,
            )
        self.train_seconds += time.perf_counter() - t0
        return report

    def retrain_members(self, m_pixels: int, rng: np.random.Generator,
                        iterations: int) -> LossReport | None:
        """Fine-tune over all members at their current relative poses."""
        ids = sorted(self.members)
        if not ids or iterations <= 0:
            return None
        kfs = [replace(self.members[i], pose=self.trained_rel[i]) for i in ids]
        report = None
        t0 = time.perf_counter()
        for _ in range(iterations):
            report = train_step(
                self.field, kfs, m_pixels, rng,
                n_point=self.cfg.n_point,
                photometric_weight=self.cfg.photometric_weight,
                max_voxels_per_ray=self.cfg.max_voxels_per_ray,
            )
        self.train_seconds += time.perf_counter() - t0
        return report

    def world_bounds(self):
        """Conservative world-frame AABB of allocated leaf voxels."""
        local = self.grid.allocated_leaf_bounds()
        if local is None:
            return None
        lo, hi = local
        corners = np.array(
            [[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])]
        )
        world = self.anchor_pose.apply(corners)
        return world.min(axis=0), world.max(axis=0)


def frustum_intersects_aabb(pose: Pose, intr: Intrinsics, bounds,
                            far: float = 50.0) -> bool:
    """Conservative frustum/AABB overlap test (never wrongly rejects)."""
    if bounds is None:
        return False
    lo, hi = bounds
    corners = np.array(
        [[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])]
    )
    cam = pose.inverse().apply(corners)
    # behind the camera or beyond the far plane (all corners on one side)
    if (cam[:, 2] <= 0).all() or (cam[:, 2] >= far).all():
        # box containing the camera still counts
        return bool(np.all(lo <= pose.translation) and np.all(pose.translation <= hi))
    margin_x = (intr.width - intr.cx) / intr.fx, intr.cx / intr.fx
    margin_y = (intr.height - intr.cy) / intr.fy, intr.cy / intr.fy
    z = np.maximum(cam[:, 2], 1e-9)
    if (cam[:, 0] > margin_x[0] * z).all() or (cam[:, 0] < -margin_x[1] * z).all():
        return bool(np.all(lo <= pose.translation) and np.all(pose.translation <= hi))
    if (cam[:, 1] > margin_y[0] * z).all() or (cam[:, 1] < -margin_y[1] * z).all():
        return bool(np.all(lo <= pose.translation) and np.all(pose.translation <= hi))
    return True


@dataclass
class FusedRender:
    color: np.ndarray
    depth: np.ndarray
    variance: np.ndarray
    observed: np.ndarray
    winner: np.ndarray  # submap id per pixel, -1 where unobserved


class SubmapAtlas:
    """Ordered collection of submaps with at most one active submap."""

    def __init__(self, cfg: SubmapConfig, seed: int = 0,
                 background=(0.0, 0.0, 0.0)):
        self.cfg = cfg
        self.submaps: list[Submap] = []
        self.active_submap_id: int | None = None
        self.background = np.asarray(background, dtype=np.float64)
        self._seed_seq = np.random.SeedSequence(seed)

    def __len__(self) -> int:
        return len(self.submaps)

    def get(self, submap_id: int) -> Submap:
        return self.submaps[submap_id]

    def keyframe_owner(self, kf_id: int) -> int | None:
        for sm in self.submaps:
            if kf_id in sm.members:
                return sm.id
        return None

    def select_local_map(self, kf: KeyframePacket) -> int:
        """Pick (or create) the submap a new keyframe belongs to.

        The keyframe joins the best-covering existing submap when its
        coverage fraction reaches the threshold, so revisited places
        never spawn redundant submaps.
        """
        best_id, best_frac = None, -1.0
        for sm in self.submaps:
            frac = sm.coverage_fraction(kf, self.cfg.covis_stride)
            if frac > best_frac:
                best_id, best_frac = sm.id, frac
        if best_id is not None and best_frac >= self.cfg.covis_threshold:
            self.active_submap_id = best_id
            return best_id
        new_id = len(self.submaps)
        rng = np.random.default_rng(self._seed_seq.spawn(1)[0])
        sm = Submap(new_id, kf.kf_id, kf.pose, self.cfg, rng)
        self.submaps.append(sm)
        self.active_submap_id = new_id
        return new_id

    def adjust_submaps(self, updated_poses: dict[int, Pose]) -> int:
        """Stage one of loop correction: move anchors, touch nothing else.

        O(#submaps) pose writes; the new anchor table becomes visible
        atomically to subsequent renders.
        """
        moved = 0
        new_anchors = []
        for sm in self.submaps:
            if sm.anchor_kf_id not in updated_poses:
                raise ValueError(f"missing pose for anchor keyframe {sm.anchor_kf_id}")
            new_pose = updated_poses[sm.anchor_kf_id]
            dt, dr = pose_delta(sm.anchor_pose, new_pose)
            if dt > 0 or dr > 0:
                moved += 1
            new_anchors.append(new_pose)
        for sm, pose in zip(self.submaps, new_anchors):
            sm.anchor_pose = pose
        return moved

    def finetune_submaps(self, updated_poses: dict[int, Pose], budget: int,
                         m_pixels: int, rng: np.random.Generator
                         ) -> dict[int, LossReport]:
        """Stage two: selectively retrain submaps whose members moved.

        A submap is touched only when some member keyframe moved
        relative to its anchor beyond the configured thresholds; its
        stored geometry is re-inserted at the new relative poses first.
        """
        reports: dict[int, LossReport] = {}
        if budget <= 0:
            return reports
        for sm in self.submaps:
            moved = False
            for kf_id, old_rel in sm.trained_rel.items():
                if kf_id not in updated_poses:
                    continue
                new_rel = compose(sm.anchor_pose.inverse(), updated_poses[kf_id])
                dt, dr = pose_delta(old_rel, new_rel)
                if dt > self.cfg.finetune_translation or dr > self.cfg.finetune_rotation:
                    moved = True
                    break
            if not moved:
                continue
            for kf_id in sorted(sm.members):
                if kf_id in updated_poses:
                    kf = sm.members[kf_id]
                    sm.trained_rel[kf_id] = compose(
                        sm.anchor_pose.inverse(), updated_poses[kf_id]
                    )
                    pts = back_project_depth_image(
                        kf.intrinsics, sm.trained_rel[kf_id], kf.depth
                    )
                    sm.grid.insert_points(pts)
            report = sm.retrain_members(m_pixels, rng, budget)
            if report is not None:
                reports[sm.id] = report
        return reports

    def render_fused(self, pose: Pose, intr: Intrinsics,
                     n_point: int | None = None, threads: int = 1) -> FusedRender:
        """Pixel-wise lowest-variance fusion across candidate submaps.

        Candidate submaps render against a frozen snapshot and merge in
        submap order, so the result is independent of ``threads``.
        """
        if not self.submaps:
            raise ValueError("atlas has no submaps")
        n_point = n_point if n_point is not None else self.cfg.n_point
        h, w = intr.height, intr.width
        best_var = np.full((h, w), np.inf)
        best_color = np.tile(self.background, (h, w, 1))
        best_depth = np.zeros((h, w))
        best_observed = np.zeros((h, w), dtype=bool)
        winner = np.full((h, w), -1, dtype=np.int64)
        candidates = [
            sm for sm in self.submaps
            if frustum_intersects_aabb(pose, intr, sm.world_bounds())
        ]
        if threads > 1 and len(candidates) > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=threads) as pool:
                renders = list(pool.map(
                    lambda sm: render_view(sm.field, sm.to_local(pose), intr, n_point),
                    candidates,
                ))
        else:
            renders = [
                render_view(sm.field, sm.to_local(pose), intr, n_point)
                for sm in candidates
            ]
        for sm, (color, depth, var, observed) in zip(candidates, renders):
            better = var < best_var
            best_var = np.where(better, var, best_var)
            best_depth = np.where(better, depth, best_depth)
            best_color = np.where(better[..., None], color, best_color)
            new_winner = better & observed
            winner = np.where(new_winner, sm.id, winner)
            best_observed = np.where(better, observed, best_observed)
        unobserved = ~best_observed
        best_var = np.where(np.isinf(best_var), UNOBSERVED_VARIANCE, best_var)
        best_color[unobserved] = self.background
        best_depth[unobserved] = 0.0
        winner[unobserved] = -1
        return FusedRender(best_color, best_depth, best_var, best_observed, winner)

    def query_fused_occupancy(self, points: np.ndarray) -> np.ndarray:
        """Occupancy at world points from the lowest-variance covering
        submap (pointwise Bernoulli variance o(1-o)); 0 when unobserved."""
        pts = np.atleast_2d(points)
        best_var = np.full(pts.shape[0], np.inf)
        occ_out = np.zeros(pts.shape[0])
        for sm in self.submaps:
            local = sm.anchor_pose.inverse().apply(pts)
            inside = sm.grid.contains_points(local)
            covered = np.zeros(pts.shape[0], dtype=bool)
            if inside.any():
                covered[inside] = sm.grid.leaf_occupied(local[inside])
            if not covered.any():
                continue
            occ, _, _ = sm.field.query(local[covered])
            var = occ * (1.0 - occ)
            tmp = np.full(pts.shape[0], np.inf)
            tmp[covered] = var
            better = tmp < best_var
            sel = np.zeros(pts.shape[0])
            sel[covered] = occ
            occ_out = np.where(better, sel, occ_out)
            best_var = np.where(better, tmp, best_var)
        return occ_out

    def query_fused_color(self, points: np.ndarray) -> np.ndarray:
        """Color at world points from the same winner rule as occupancy."""
        pts = np.atleast_2d(points)
        best_var = np.full(pts.shape[0], np.inf)
        col_out = np.zeros((pts.shape[0], 3))
        for sm in self.submaps:
            local = sm.anchor_pose.inverse().apply(pts)
            inside = sm.grid.contains_points(local)
            covered = np.zeros(pts.shape[0], dtype=bool)
            if inside.any():
                covered[inside] = sm.grid.leaf_occupied(local[inside])
            if not covered.any():
                continue
            occ, col, _ = sm.field.query(local[covered])
            var = occ * (1.0 - occ)
            tmp = np.full(pts.shape[0], np.inf)
            tmp[covered] = var
            better = tmp < best_var
            sel = np.zeros((pts.shape[0], 3))
            sel[covered] = col
            col_out = np.where(better[:, None], sel, col_out)
            best_var = np.where(better, tmp, best_var)
        return np.clip(col_out, 0.0, 1.0)

    def checksum(self) -> str:
        """Digest of every feature array and decoder weight, for
        verifying that rigid adjustments leave parameters untouched."""
        import hashlib

        h = hashlib.sha256()
        for sm in self.submaps:
            for level in sm.grid.active_levels:
                h.update(sm.grid.features[level][: sm.grid.feature_count(level)].tobytes())
            for dec in (sm.field.occ_decoder, sm.field.color_decoder):
                for p in dec.params():
                    h.update(p.tobytes())
        return h.hexdigest()
