"""Synthetic tracking front-end and pose-graph back-end.

Stands in for a feature-based tracker: it generates a ground-truth
trajectory through config waypoints, accumulates odometric drift
(seeded noise plus a deterministic bias) on the estimated poses,
selects keyframes by motion thresholds, detects loops by ground-truth
revisit proximity, and corrects all keyframe poses with a Gauss-Newton
pose-graph optimization over SE(3) (the substitute for global bundle
adjustment).

The keyframe stream is deterministic given the seed.  Loop correction
publishes a complete new pose table; consumers never observe a
half-updated one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, compose, pose_delta, se3_exp, se3_log


# -- trajectory generation -----------------------------------------------------

def _look_rotation(forward: np.ndarray, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera rotation with +z along ``forward`` and +y pointing down."""
    z = np.asarray(forward, dtype=np.float64)
    nz = np.linalg.norm(z)
    if nz < 1e-12:
        z = np.array([1.0, 0.0, 0.0])
    else:
        z = z / nz
    up = np.asarray(up, dtype=np.float64)
    y = -up + z * (up @ z)  # project world-down onto the plane normal to z
    ny = np.linalg.norm(y)
    if ny < 1e-9:
        y = np.array([0.0, 1.0, 0.0])
    else:
        y /= ny
    x = np.cross(y, z)
    return np.stack([x, y, z], axis=1)


@dataclass
class DriftModel:
    """Per-frame odometry corruption: seeded noise plus fixed bias."""

    trans_noise: float = 0.002  # meters per frame, isotropic sigma
    rot_noise: float = 0.0  # radians per frame
    trans_bias: tuple = (0.0, 0.0, 0.0)  # meters per frame, camera frame
    rot_bias: tuple = (0.0, 0.0, 0.0)  # radians per frame, axis-angle


class TrajectoryModel:
    """Waypoint trajectory sampled at a fixed frame rate.

    Ground truth interpolates the waypoint polyline at constant speed;
    the camera looks along the direction of travel.  The estimate
    accumulates the drift model multiplicatively on odometry steps.
    """

    def __init__(self, waypoints, n_frames: int, drift: DriftModel | None = None,
                 rate_hz: float = 10.0, seed: int = 0, closed: bool = False):
        wp = np.atleast_2d(np.asarray(waypoints, dtype=np.float64))
        if closed and not np.allclose(wp[0], wp[-1]):
            wp = np.vstack([wp, wp[0]])
        if wp.shape[0] < 2:
            raise ValueError("need at least two waypoints")
        self.waypoints = wp
        self.n_frames = int(n_frames)
        self.rate_hz = float(rate_hz)
        self.drift = drift if drift is not None else DriftModel()
        self.rng = np.random.default_rng(seed)
        self._gt = self._build_gt_poses()
        self._frame = 0
        self._est_prev: Pose | None = None

    def _build_gt_poses(self) -> list[Pose]:
        seg = np.diff(self.waypoints, axis=0)
        seg_len = np.linalg.norm(seg, axis=1)
        cum = np.concatenate([[0.0], np.cumsum(seg_len)])
        total = cum[-1]
        poses = []
        for i in range(self.n_frames):
            s = total * i / max(self.n_frames - 1, 1)
            k = int(np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1))
            u = (s - cum[k]) / seg_len[k] if seg_len[k] > 0 else 0.0
            p = self.waypoints[k] + u * seg[k]
            poses.append(Pose(_look_rotation(seg[k]), p))
        return poses

    def __len__(self) -> int:
        return self.n_frames

    def gt_pose(self, frame: int) -> Pose:
        return self._gt[frame]

    def timestamp(self, frame: int) -> float:
        return frame / self.rate_hz

    def next_frame(self):
        """(frame id, ground-truth pose, drifted estimate) or raises
        ``StopIteration`` when the trajectory is exhausted."""
        if self._frame >= self.n_frames:
            raise StopIteration("trajectory exhausted")
        i = self._frame
        gt = self._gt[i]
        if i == 0:
            est = gt
        else:
            inc = compose(self._gt[i - 1].inverse(), gt)
            d = self.drift
            noise = np.concatenate([
                self.rng.normal(0.0, d.trans_noise, 3) if d.trans_noise > 0 else np.zeros(3),
                self.rng.normal(0.0, d.rot_noise, 3) if d.rot_noise > 0 else np.zeros(3),
            ])
            bias = np.concatenate([d.trans_bias, d.rot_bias])
            err = se3_exp(noise + bias)
            est = compose(self._est_prev, compose(inc, err))
        self._est_prev = est
        self._frame += 1
        return i, gt, est


def is_keyframe(prev_kf: Pose | None, current: Pose,
                trans_threshold: float = 0.2,
                rot_threshold: float = np.deg2rad(10.0)) -> bool:
    """Motion-based keyframe gate; the first frame always qualifies."""
    if prev_kf is None:
        return True
    dt, dr = pose_delta(prev_kf, current)
    return dt > trans_threshold or dr > rot_threshold


def detect_loop(current_gt: Pose, history_gt: dict[int, Pose], current_index: int,
                radius: float = 0.5, angle: float = np.deg2rad(20.0),
                window: int = 20):
    """Oldest keyframe revisited by the current one, or None.

    Uses ground-truth poses as a perfect place-recognition oracle and
    skips the last ``window`` keyframes (too recent to count as a loop).
    """
    ids = sorted(k for k in history_gt if k != current_index)
    candidates = ids[:-window] if window > 0 else ids
    for kf_id in candidates:
        dt, dr = pose_delta(history_gt[kf_id], current_gt)
        if dt < radius and dr < angle:
            return kf_id
    return None


# -- pose graph ------------------------------------------------------------------

@dataclass
class PoseGraphEdge:
    i: int
    j: int
    measurement: Pose  # T_i^-1 T_j as measured
    weight: float = 1.0
    kind: str = "odometry"  # odometry | loop


@dataclass
class PoseGraph:
    """Keyframe nodes with SE(3) estimates plus relative-pose edges."""

    nodes: dict[int, Pose] = field(default_factory=dict)
    edges: list[PoseGraphEdge] = field(default_factory=list)

    def add_node(self, kf_id: int, pose: Pose):
        self.nodes[kf_id] = pose

    def add_edge(self, i: int, j: int, measurement: Pose, weight: float = 1.0,
                 kind: str = "odometry"):
        if i not in self.nodes or j not in self.nodes:
            raise ValueError("edge endpoints must be existing nodes")
        self.edges.append(PoseGraphEdge(i, j, measurement, weight, kind))

    def is_connected(self) -> bool:
        if not self.nodes:
            return False
        adj: dict[int, set] = {k: set() for k in self.nodes}
        for e in self.edges:
            adj[e.i].add(e.j)
            adj[e.j].add(e.i)
        seen = set()
        stack = [next(iter(self.nodes))]
        while stack:
            k = stack.pop()
            if k in seen:
                continue
            seen.add(k)
            stack.extend(adj[k] - seen)
        return len(seen) == len(self.nodes)

    def total_residual(self) -> float:
        return sum(
            e.weight * float(np.dot(r, r))
            for e, r in ((e, _edge_residual(self.nodes, e)) for e in self.edges)
        )


def _edge_residual(nodes: dict[int, Pose], e: PoseGraphEdge) -> np.ndarray:
    rel = compose(nodes[e.i].inverse(), nodes[e.j])
    return se3_log(compose(e.measurement.inverse(), rel))


def _adjoint(pose: Pose) -> np.ndarray:
    r, t = pose.rotation, pose.translation
    tx = np.array([[0, -t[2], t[1]], [t[2], 0, -t[0]], [-t[1], t[0], 0]])
    ad = np.zeros((6, 6))
    ad[:3, :3] = r
    ad[:3, 3:] = tx @ r
    ad[3:, 3:] = r
    return ad


def _jr_inv(xi: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian of SE(3), second-order series."""
    rho, phi = xi[:3], xi[3:]
    px = np.array([[0, -phi[2], phi[1]], [phi[2], 0, -phi[0]], [-phi[1], phi[0], 0]])
    rx = np.array([[0, -rho[2], rho[1]], [rho[2], 0, -rho[0]], [-rho[1], rho[0], 0]])
    ad = np.zeros((6, 6))
    ad[:3, :3] = px
    ad[:3, 3:] = rx
    ad[3:, 3:] = px
    return np.eye(6) + 0.5 * ad + (ad @ ad) / 12.0


def optimize_pose_graph(graph: PoseGraph, gauge_id: int | None = None,
                        max_iterations: int = 100, tol: float = 1e-9):
    """Damped Gauss-Newton over SE(3) with one gauge-fixed node.

    Returns (updated nodes dict, final total residual).  The objective
    never increases across accepted iterations; an increase triggers a
    damped retry (Levenberg style).  Raises on a disconnected graph.
    """
    if not graph.is_connected():
        raise ValueError("pose graph is disconnected")
    ids = sorted(graph.nodes)
    if gauge_id is None:
        gauge_id = ids[0]
    index = {k: n for n, k in enumerate(ids)}
    poses = {k: graph.nodes[k] for k in ids}
    n = len(ids)
    residual = _total(graph.edges, poses)
    lam = 0.0
    for _ in range(max_iterations):
        big_h = np.zeros((6 * n, 6 * n))
        big_b = np.zeros(6 * n)
        for e in graph.edges:
            r = _edge_residual(poses, e)
            jri = _jr_inv(r)
            jj = jri
            ji = -jri @ _adjoint(compose(poses[e.j].inverse(), poses[e.i]))
            ii, ij = 6 * index[e.i], 6 * index[e.j]
            wi = e.weight
            big_h[ii : ii + 6, ii : ii + 6] += wi * ji.T @ ji
            big_h[ij : ij + 6, ij : ij + 6] += wi * jj.T @ jj
            big_h[ii : ii + 6, ij : ij + 6] += wi * ji.T @ jj
            big_h[ij : ij + 6, ii : ii + 6] += wi * jj.T @ ji
            big_b[ii : ii + 6] += wi * ji.T @ r
            big_b[ij : ij + 6] += wi * jj.T @ r
        g = 6 * index[gauge_id]
        keep = np.ones(6 * n, dtype=bool)
        keep[g : g + 6] = False
        h = big_h[np.ix_(keep, keep)]
        b = big_b[keep]

        accepted = False
        for _attempt in range(8):
            try:
                delta = np.linalg.solve(h + lam * np.eye(h.shape[0]), -b)
            except np.linalg.LinAlgError:
                lam = max(10.0 * lam, 1e-6)
                continue
            full = np.zeros(6 * n)
            full[keep] = delta
            trial = {
                k: compose(poses[k], se3_exp(full[6 * index[k] : 6 * index[k] + 6]))
                for k in ids
            }
            new_residual = _total(graph.edges, trial)
            if new_residual <= residual + 1e-15:
                poses = trial
                accepted = True
                lam *= 0.25
                break
            lam = max(10.0 * lam, 1e-6)
        if not accepted:
            break
        if residual - new_residual < tol:
            residual = new_residual
            break
        residual = new_residual
    return poses, residual


def _total(edges, poses) -> float:
    return sum(e.weight * float(np.dot(r, r))
               for e, r in ((e, _edge_residual(poses, e)) for e in edges))


def save_trajectory(path, records):
    """TUM-style text dump: 'timestamp tx ty tz qx qy qz qw' per line."""
    from .geometry import rotation_to_quat

    with open(path, "w") as f:
        for ts, pose in records:
            w, x, y, z = rotation_to_quat(pose.rotation)
            t = pose.translation
            f.write(
                f"{ts:.6f} {t[0]:.9f} {t[1]:.9f} {t[2]:.9f} "
                f"{x:.9f} {y:.9f} {z:.9f} {w:.9f}\n"
            )


def load_trajectory(path):
    """Inverse of :func:`save_trajectory`."""
    from .geometry import quat_to_rotation

    records = []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            ts, tx, ty, tz, qx, qy, qz, qw = (float(p) for p in parts)
            records.append((ts, Pose(quat_to_rotation([qw, qx, qy, qz]), [tx, ty, tz])))
    return records
