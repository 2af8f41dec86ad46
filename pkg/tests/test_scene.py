"""Scene oracle tests: SDF exactness, raycast vs closed forms, frames.

The raycast oracle solves sphere and box intersections analytically
(quadratic and slab forms), independent of the sphere-tracing path.
"""

import numpy as np
import pytest

from octmap.geometry import Intrinsics, Pose, Ray
from octmap.scene import (
    ColorSpec,
    Primitive,
    SceneSpec,
    default_room_scene,
    raycast,
    raycast_batch,
    render_gt_frame,
    sdf,
    sdf_points,
)


def sphere_hit_oracle(center, radius, o, d, t_max):
    """Smallest positive root of |o + t d - c|^2 = r^2."""
    oc = o - center
    b = 2.0 * np.dot(oc, d)
    c = np.dot(oc, oc) - radius**2
    disc = b * b - 4 * c
    if disc < 0:
        return None
    sq = np.sqrt(disc)
    for t in ((-b - sq) / 2.0, (-b + sq) / 2.0):
        if 1e-12 < t <= t_max:
            return t
    return None


def box_hit_oracle(center, half, o, d, t_max):
    """Slab test entry point of an axis-aligned box."""
    lo, hi = center - half, center + half
    ta, tb = 0.0, t_max
    for a in range(3):
        if d[a] == 0.0:
            if o[a] < lo[a] or o[a] > hi[a]:
                return None
            continue
        t0, t1 = (lo[a] - o[a]) / d[a], (hi[a] - o[a]) / d[a]
        if t0 > t1:
            t0, t1 = t1, t0
        ta, tb = max(ta, t0), min(tb, t1)
    if tb < ta:
        return None
    return ta if ta > 1e-12 else None


def sphere(center, radius, color=(0.5, 0.5, 0.5)):
    return Primitive(
        kind="sphere", pose=Pose(np.eye(3), np.asarray(center, dtype=float)),
        radius=radius, color=ColorSpec(kind="constant", color=color),
    )


def box(center, half, color=(0.5, 0.5, 0.5)):
    return Primitive(
        kind="box", pose=Pose(np.eye(3), np.asarray(center, dtype=float)),
        half_extents=tuple(half), color=ColorSpec(kind="constant", color=color),
    )


class TestSdf:
    def test_sphere_distance(self):
        scene = SceneSpec(primitives=(sphere([0, 0, 0], 1.0),))
        d, _ = sdf(scene, (2.0, 0.0, 0.0))
        assert d == pytest.approx(1.0, abs=1e-12)

    def test_point_on_box_face(self):
        scene = SceneSpec(primitives=(box([0, 0, 0], [1, 1, 1]),))
        d, _ = sdf(scene, (1.0, 0.2, -0.3))
        assert d == pytest.approx(0.0, abs=1e-12)

    def test_union_is_min_of_parts(self):
        s1 = sphere([0, 0, 0], 1.0)
        s2 = sphere([3, 0, 0], 0.5)
        both = SceneSpec(primitives=(s1, s2))
        rng = np.random.default_rng(0)
        pts = rng.uniform(-4, 6, (100, 3))
        d_union, _ = sdf_points(both, pts)
        d1 = s1.sdf(pts)
        d2 = s2.sdf(pts)
        np.testing.assert_allclose(d_union, np.minimum(d1, d2), atol=1e-12)

    def test_room_interior_positive(self):
        scene = default_room_scene()
        d, _ = sdf(scene, (0.0, -2.0, 1.5))
        assert d > 0

    def test_lipschitz_bound(self):
        scene = default_room_scene()
        rng = np.random.default_rng(1)
        a = rng.uniform(-3, 3, (200, 3))
        b = a + rng.normal(0, 0.05, (200, 3))
        da, _ = sdf_points(scene, a)
        db, _ = sdf_points(scene, b)
        step = np.linalg.norm(a - b, axis=1)
        assert (np.abs(da - db) <= step + 1e-9).all()


class TestRaycast:
    def test_unit_sphere_head_on(self):
        scene = SceneSpec(primitives=(sphere([0, 0, 0], 1.0),))
        hit = raycast(scene, Ray(origin=(0, 0, -3), direction=(0, 0, 1)), 10.0)
        assert hit is not None
        assert hit[0] == pytest.approx(2.0, abs=1e-6)

    def test_parallel_miss(self):
        scene = SceneSpec(primitives=(box([0, 0, 0], [1, 1, 1]),))
        hit = raycast(scene, Ray(origin=(0, 2.0, -5), direction=(0, 0, 1)), 20.0)
        assert hit is None

    def test_invalid_t_max(self):
        scene = SceneSpec(primitives=(sphere([0, 0, 0], 1.0),))
        with pytest.raises(ValueError):
            raycast(scene, Ray(origin=(0, 0, -3), direction=(0, 0, 1)), 0.0)

    def test_against_closed_form_sphere_and_box(self):
        c_s, r_s = np.array([0.5, -0.2, 0.3]), 0.8
        c_b, h_b = np.array([-1.5, 1.0, 0.0]), np.array([0.6, 0.4, 0.9])
        scene = SceneSpec(primitives=(sphere(c_s, r_s), box(c_b, h_b)))
        rng = np.random.default_rng(2)
        n = 10_000
        origins = rng.uniform(-4, 4, (n, 3))
        dirs = rng.normal(size=(n, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        # keep origins outside both solids
        d0, _ = sdf_points(scene, origins)
        keep = d0 > 1e-3
        origins, dirs = origins[keep], dirs[keep]
        depth, _, hit = raycast_batch(scene, origins, dirs, 25.0)
        max_err = 0.0
        mismatches = 0
        for i in range(origins.shape[0]):
            ts = sphere_hit_oracle(c_s, r_s, origins[i], dirs[i], 25.0)
            tb = box_hit_oracle(c_b, h_b, origins[i], dirs[i], 25.0)
            t_true = min((t for t in (ts, tb) if t is not None), default=None)
            if t_true is None:
                if hit[i]:
                    mismatches += 1
                continue
            if not hit[i]:
                mismatches += 1
                continue
            max_err = max(max_err, abs(depth[i] - t_true))
        assert mismatches <= 2  # tangential boundary cases only
        assert max_err < 1e-5

    def test_depth_satisfies_sdf_bound(self):
        scene = default_room_scene()
        rng = np.random.default_rng(3)
        origins = np.tile(np.array([0.0, 0.0, 1.5]), (500, 1))
        dirs = rng.normal(size=(500, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        depth, _, hit = raycast_batch(scene, origins, dirs, 25.0)
        pts = origins[hit] + depth[hit][:, None] * dirs[hit]
        d, _ = sdf_points(scene, pts)
        assert np.abs(d).max() <= 1e-5


class TestRenderFrame:
    intr = Intrinsics(fx=60.0, fy=60.0, cx=31.5, cy=23.5, width=64, height=48)

    def test_closed_room_all_pixels_hit(self):
        scene = default_room_scene()
        pose = Pose(np.eye(3), np.array([0.0, 0.0, 1.5]))
        _, depth = render_gt_frame(scene, pose, self.intr)
        assert (depth > 0).all()

    def test_known_wall_depth(self):
        # wall plane z = 2 facing a camera at origin: central pixel depth 2
        wall = box([0.0, 0.0, 52.0], [60.0, 60.0, 50.0])
        scene = SceneSpec(primitives=(wall,))
        intr = Intrinsics(fx=60.0, fy=60.0, cx=32.0, cy=24.0, width=64, height=48)
        pose = Pose(np.eye(3), np.zeros(3))
        _, depth = render_gt_frame(scene, pose, intr)
        assert depth[24, 32] == pytest.approx(2.0, abs=1e-6)

    def test_checker_period_in_pixels(self):
        # checkered wall at distance 2, checker period 0.5 m, fx = 60:
        # one tile spans fx * period / depth = 15 pixels
        wall = Primitive(
            kind="box", pose=Pose(np.eye(3), np.array([0.25, 0.25, 52.0])),
            half_extents=(60.0, 60.0, 50.0),
            color=ColorSpec(kind="checker", period=0.5,
                            color=(1.0, 1.0, 1.0), color_b=(0.0, 0.0, 0.0)),
        )
        scene = SceneSpec(primitives=(wall,))
        intr = Intrinsics(fx=60.0, fy=60.0, cx=32.0, cy=24.0, width=64, height=48)
        rgb, _ = render_gt_frame(scene, Pose(np.eye(3), np.zeros(3)), intr)
        row = rgb[24, :, 0]
        flips = np.nonzero(np.abs(np.diff(row)) > 0.5)[0]
        gaps = np.diff(flips)
        assert np.abs(gaps - 15).max() <= 1

    def test_deterministic(self):
        scene = default_room_scene()
        pose = Pose(np.eye(3), np.array([0.3, -0.4, 1.2]))
        a = render_gt_frame(scene, pose, self.intr)
        b = render_gt_frame(scene, pose, self.intr)
        assert (a[0] == b[0]).all() and (a[1] == b[1]).all()

    def test_ray_depth_convention_matches_geometry(self):
        # corner pixels: ray-length depth exceeds z distance
        wall = box([0.0, 0.0, 52.0], [60.0, 60.0, 50.0])
        scene = SceneSpec(primitives=(wall,))
        pose = Pose(np.eye(3), np.zeros(3))
        _, depth = render_gt_frame(scene, pose, self.intr)
        assert depth[0, 0] > 2.0  # z distance is exactly 2 at every pixel
