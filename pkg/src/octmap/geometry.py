"""Rigid-body transforms, pinhole camera model, and ray generation.

Conventions used by every module in this package:

- frames are right-handed; the camera looks along +z with +x right and
  +y down (so +x is the image column direction, +y the row direction)
- ``Pose`` maps camera coordinates to world coordinates (world <- camera)
- depth means distance along the ray, not distance along the optical axis
- twists are ordered (translation, rotation)

Poses and intrinsics are immutable values and safe to share across
threads without synchronization.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

_ORTHO_TOL = 1e-12


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
    )


def _project_to_so3(m: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius sense (SVD projection)."""
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] = -u[:, -1]
        r = u @ vt
    return r


@dataclass(frozen=True)
class Pose:
    """Rigid transform: ``x_world = rotation @ x_local + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one point (3,) or a batch (n, 3)."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def rotate(self, dirs: np.ndarray) -> np.ndarray:
        return np.asarray(dirs, dtype=np.float64) @ self.rotation.T

    def is_valid(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        return (
            np.allclose(r.T @ r, np.eye(3), atol=tol)
            and abs(np.linalg.det(r) - 1.0) <= tol
        )

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)


def compose(a: Pose, b: Pose) -> Pose:
    """Pose applying ``b`` first, then ``a``."""
    r = a.rotation @ b.rotation
    drift = np.abs(r.T @ r - np.eye(3)).max()
    if drift > _ORTHO_TOL:
        r = _project_to_so3(r)
    return Pose(r, a.rotation @ b.translation + a.translation)


def rotation_angle(r: np.ndarray) -> float:
    """Rotation angle in radians of a rotation matrix."""
    c = (np.trace(r) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def pose_delta(a: Pose, b: Pose) -> tuple[float, float]:
    """(translation, rotation) magnitude of ``a^-1 b``."""
    rel = compose(a.inverse(), b)
    return float(np.linalg.norm(rel.translation)), rotation_angle(rel.rotation)


# -- se(3) exponential / logarithm ------------------------------------------

def se3_exp(xi: np.ndarray) -> Pose:
    """Exponential map; ``xi`` is (rho, phi) with rotation part last."""
    xi = np.asarray(xi, dtype=np.float64).reshape(6)
    rho, phi = xi[:3], xi[3:]
    theta = np.linalg.norm(phi)
    k = _skew(phi)
    k2 = k @ k
    if theta < 1e-8:
        # Taylor expansions around theta = 0
        a = 1.0 - theta**2 / 6.0
        b = 0.5 - theta**2 / 24.0
        c = 1.0 / 6.0 - theta**2 / 120.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta**2
        c = (theta - np.sin(theta)) / theta**3
    r = np.eye(3) + a * k + b * k2
    v = np.eye(3) + b * k + c * k2
    return Pose(_project_to_so3(r) if theta > 1.0 else r, v @ rho)


def se3_log(pose: Pose) -> np.ndarray:
    """Logarithm map, inverse of :func:`se3_exp`.

    Raises ``ValueError`` for rotations within 1e-6 of pi, where the
    axis is ill-conditioned.
    """
    r = pose.rotation
    theta = rotation_angle(r)
    if theta > np.pi - 1e-6:
        raise ValueError("se3_log ill-conditioned: rotation angle near pi")
    if theta < 1e-8:
        w = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
        phi = w  # first-order: R approx I + skew(phi)
        k = _skew(phi)
        v_inv = np.eye(3) - 0.5 * k
    else:
        w = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
        phi = theta / (2.0 * np.sin(theta)) * w
        k = _skew(phi)
        coef = 1.0 / theta**2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
        v_inv = np.eye(3) - 0.5 * k + coef * (k @ k)
    rho = v_inv @ pose.translation
    return np.concatenate([rho, phi])


# -- quaternions (checkpoints and trajectory files only) ---------------------

def rotation_to_quat(r: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) with the canonical sign w >= 0."""
    m = np.asarray(r, dtype=np.float64)
    tr = np.trace(m)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s,
             (m[1, 0] - m[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(m)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(m[i, i] - m[j, j] - m[k, k] + 1.0) * 2.0
        q = np.empty(4)
        q[0] = (m[k, j] - m[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (m[j, i] + m[i, j]) / s
        q[1 + k] = (m[k, i] + m[i, k]) / s
    q /= np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    return q


def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


# -- camera model ------------------------------------------------------------

@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    pixel: tuple[int, int] = (0, 0)

    def __post_init__(self):
        o = np.array(self.origin, dtype=np.float64).reshape(3)
        d = np.array(self.direction, dtype=np.float64).reshape(3)
        o.setflags(write=False)
        d.setflags(write=False)
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def at(self, t) -> np.ndarray:
        return self.origin + np.multiply.outer(t, self.direction)


@dataclass(frozen=True)
class KeyframePacket:
    """One posed RGB-D keyframe. Depth 0 marks an invalid measurement."""

    kf_id: int
    rgb: np.ndarray  # (h, w, 3) in [0, 1]
    depth: np.ndarray  # (h, w) ray-length meters, 0 = invalid
    intrinsics: Intrinsics
    pose: Pose  # world <- camera
    timestamp: float = 0.0


@lru_cache(maxsize=16)
def _camera_dirs(intr: Intrinsics) -> np.ndarray:
    """Unit ray directions in the camera frame, shape (h, w, 3)."""
    u = np.arange(intr.width, dtype=np.float64)
    v = np.arange(intr.height, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    d = np.stack(
        [(uu - intr.cx) / intr.fx, (vv - intr.cy) / intr.fy, np.ones_like(uu)],
        axis=-1,
    )
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    d.setflags(write=False)
    return d


def camera_rays(intr: Intrinsics, pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """World-frame origin (3,) and unit directions (h, w, 3) for every pixel."""
    dirs = _camera_dirs(intr) @ pose.rotation.T
    return pose.translation.copy(), dirs


def pixel_to_ray(intr: Intrinsics, pose: Pose, u: int, v: int) -> Ray:
    if not (0 <= u < intr.width and 0 <= v < intr.height):
        raise ValueError(f"pixel ({u}, {v}) outside {intr.width}x{intr.height} image")
    d = np.array([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0])
    d /= np.linalg.norm(d)
    return Ray(pose.translation, pose.rotation @ d, (int(u), int(v)))


def back_project(intr: Intrinsics, pose: Pose, u, v, depth) -> np.ndarray:
    """World point at ray-length ``depth`` through pixel (u, v)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d = np.stack(
        [(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1
    )
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return pose.apply(d * np.asarray(depth)[..., None])


def project(intr: Intrinsics, pose: Pose, points: np.ndarray):
    """Pixel coordinates and ray-length depth of world points.

    Returns (u, v, depth); points behind the camera get depth <= 0.
    """
    p = pose.inverse().apply(points)
    p = np.atleast_2d(p)
    z = p[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * p[:, 0] / z + intr.cx
        v = intr.fy * p[:, 1] / z + intr.cy
    depth = np.sign(z) * np.linalg.norm(p, axis=1)
    if np.asarray(points).ndim == 1:
        return float(u[0]), float(v[0]), float(depth[0])
    return u, v, depth


def back_project_depth_image(
    intr: Intrinsics, pose: Pose, depth: np.ndarray
) -> np.ndarray:
    """World points of all valid (depth > 0) pixels, shape (n, 3)."""
    dirs = _camera_dirs(intr)
    mask = depth > 0
    pts_cam = dirs[mask] * depth[mask][..., None]
    return pose.apply(pts_cam)
