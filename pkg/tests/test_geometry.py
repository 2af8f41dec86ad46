"""Rigid-transform, camera-model and ray-generation tests.

Derived expectations are hand-computed (rotation matrices written out,
pinhole algebra in comments) or checked by round-trip identities.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from octmap.geometry import (
    Intrinsics,
    Pose,
    back_project,
    compose,
    pixel_to_ray,
    project,
    quat_to_rotation,
    rotation_to_quat,
    se3_exp,
    se3_log,
)


def rot_z(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def random_pose(rng, max_angle=2.5):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(-max_angle, max_angle)
    return se3_exp(np.concatenate([rng.uniform(-2, 2, 3), axis * angle]))


finite_twists = st.lists(
    st.floats(-0.5, 0.5, allow_nan=False), min_size=6, max_size=6
)


class TestPose:
    def test_identity_compose(self):
        rng = np.random.default_rng(0)
        p = random_pose(rng)
        q = compose(Pose.identity(), p)
        np.testing.assert_allclose(q.rotation, p.rotation, atol=1e-15)
        np.testing.assert_allclose(q.translation, p.translation, atol=1e-15)

    def test_inverse_compose_is_identity(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            p = random_pose(rng)
            e = compose(p, p.inverse())
            np.testing.assert_allclose(e.rotation, np.eye(3), atol=1e-9)
            np.testing.assert_allclose(e.translation, 0.0, atol=1e-9)

    def test_rotz_squared(self):
        # rotZ(90) . rotZ(90) = rotZ(180) = diag(-1, -1, 1)
        p = Pose(rot_z(np.pi / 2), np.zeros(3))
        q = compose(p, p)
        expected = np.array([[-1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]])
        np.testing.assert_allclose(q.rotation, expected, atol=1e-15)

    def test_composition_associative(self):
        rng = np.random.default_rng(2)
        a, b, c = (random_pose(rng) for _ in range(3))
        left = compose(compose(a, b), c)
        right = compose(a, compose(b, c))
        np.testing.assert_allclose(left.matrix(), right.matrix(), atol=1e-9)

    def test_point_roundtrip(self):
        rng = np.random.default_rng(3)
        p = random_pose(rng)
        pts = rng.uniform(-5, 5, (100, 3))
        back = p.inverse().apply(p.apply(pts))
        np.testing.assert_allclose(back, pts, atol=1e-9)

    def test_rotation_stays_orthonormal_under_long_chains(self):
        rng = np.random.default_rng(4)
        p = Pose.identity()
        step = random_pose(rng, max_angle=0.3)
        for _ in range(2000):
            p = compose(p, step)
        r = p.rotation
        np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-9)
        assert abs(np.linalg.det(r) - 1.0) < 1e-9


class TestSe3:
    def test_zero_twist(self):
        p = se3_exp(np.zeros(6))
        np.testing.assert_allclose(p.matrix(), np.eye(4), atol=1e-15)

    def test_pure_rotation_z(self):
        theta = 0.7
        p = se3_exp([0, 0, 0, 0, 0, theta])
        np.testing.assert_allclose(p.rotation, rot_z(theta), atol=1e-12)
        np.testing.assert_allclose(p.translation, 0.0, atol=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(finite_twists)
    def test_exp_log_roundtrip(self, xi):
        xi = np.asarray(xi)
        back = se3_log(se3_exp(xi))
        np.testing.assert_allclose(back, xi, atol=1e-8)

    def test_log_near_pi_raises(self):
        p = Pose(rot_z(np.pi - 1e-9), np.zeros(3))
        with pytest.raises(ValueError):
            se3_log(p)

    def test_quaternion_roundtrip_canonical_sign(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            r = random_pose(rng).rotation
            q = rotation_to_quat(r)
            assert q[0] >= 0.0
            np.testing.assert_allclose(quat_to_rotation(q), r, atol=1e-12)


class TestCamera:
    intr = Intrinsics(fx=100.0, fy=100.0, cx=40.0, cy=30.0, width=80, height=60)

    def test_intrinsics_validation(self):
        with pytest.raises(ValueError):
            Intrinsics(0.0, 100.0, 40.0, 30.0, 80, 60)
        with pytest.raises(ValueError):
            Intrinsics(100.0, 100.0, 90.0, 30.0, 80, 60)

    def test_principal_point_is_optical_axis(self):
        ray = pixel_to_ray(self.intr, Pose.identity(), 40, 30)
        np.testing.assert_allclose(ray.direction, [0.0, 0.0, 1.0], atol=1e-15)
        np.testing.assert_allclose(ray.origin, 0.0, atol=1e-15)

    def test_one_focal_length_right(self):
        # u = cx + fx -> direction proportional to (1, 0, 1)
        # hand algebra: ((u-cx)/fx, (v-cy)/fy, 1) = (1, 0, 1), norm sqrt(2)
        ray = pixel_to_ray(
            Intrinsics(40.0, 40.0, 40.0, 30.0, 120, 60), Pose.identity(), 80, 30
        )
        np.testing.assert_allclose(
            ray.direction, [1 / np.sqrt(2), 0.0, 1 / np.sqrt(2)], atol=1e-12
        )

    def test_out_of_bounds_pixel(self):
        with pytest.raises(ValueError):
            pixel_to_ray(self.intr, Pose.identity(), 80, 0)

    def test_project_backproject_roundtrip(self):
        rng = np.random.default_rng(6)
        pose = random_pose(rng)
        for _ in range(50):
            u = rng.integers(0, self.intr.width)
            v = rng.integers(0, self.intr.height)
            d = rng.uniform(0.5, 8.0)
            pt = back_project(self.intr, pose, u, v, d)
            u2, v2, d2 = project(self.intr, pose, pt)
            assert abs(u2 - u) < 1e-6 and abs(v2 - v) < 1e-6
            assert abs(d2 - d) < 1e-9

    def test_ray_directions_unit_on_grid(self):
        intr = Intrinsics(50.0, 45.0, 31.5, 31.5, 64, 64)
        rng = np.random.default_rng(7)
        pose = random_pose(rng)
        for u in range(0, 64, 7):
            for v in range(0, 64, 7):
                ray = pixel_to_ray(intr, pose, u, v)
                assert abs(np.linalg.norm(ray.direction) - 1.0) < 1e-9

    def test_ray_depth_is_ray_length_not_z(self):
        # off-axis pixel at ray depth d: the point's z is d / norm-factor
        u, v, d = 60, 30, 2.0
        pt = back_project(self.intr, Pose.identity(), u, v, d)
        assert np.linalg.norm(pt) == pytest.approx(d, abs=1e-12)
        assert pt[2] < d  # z-depth is strictly smaller off-axis

    def test_ray_is_immutable(self):
        ray = pixel_to_ray(self.intr, Pose.identity(), 10, 10)
        with pytest.raises(ValueError):
            ray.direction[0] = 5.0
