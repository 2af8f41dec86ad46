"""End-to-end run orchestration: simulate, map, close loops, evaluate.

The run loop mirrors the three-process contract: a tracking flow emits
keyframes (here simulated with drift), the mapping flow selects a local
map and trains it, and the loop-closing flow re-optimizes all keyframe
poses and publishes a complete new pose table that the mapping side
consumes atomically (a dict swap).  Timings for keyframe integration,
stage-one adjustment and fine-tuning are logged per event as JSON
lines.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import metrics as mx
from .config import RunConfig
from .geometry import Intrinsics, KeyframePacket, Pose, compose
from .scene import SceneSpec, render_gt_frame, sdf_points
from .submaps import SubmapAtlas
from .tracking import (
    PoseGraph,
    TrajectoryModel,
    detect_loop,
    is_keyframe,
    optimize_pose_graph,
    save_trajectory,
)


@dataclass
class LoopEvent:
    kf_id: int
    matched_kf_id: int
    adjust_seconds: float
    finetune_seconds: float
    anchors_moved: int
    submaps_finetuned: int


@dataclass
class KeyframeStat:
    kf_id: int
    submap_count: int
    node_count: int
    mapping_seconds: float


@dataclass
class RunResult:
    atlas: SubmapAtlas
    pose_table: dict[int, Pose]
    gt_poses: dict[int, Pose]
    timestamps: dict[int, float]
    loop_events: list[LoopEvent]
    training_seconds: float
    keyframe_count: int
    raw_estimates: dict[int, Pose] | None = None
    odometry_edges: list | None = None
    loop_pairs: list | None = None
    keyframe_stats: list | None = None


def make_trajectory(cfg: RunConfig, seed_offset: int = 0) -> TrajectoryModel:
    t = cfg.trajectory
    return TrajectoryModel(
        waypoints=t.waypoints,
        n_frames=t.n_frames,
        drift=t.drift(),
        rate_hz=t.rate_hz,
        seed=cfg.seed + seed_offset,
        closed=t.closed,
    )


def run_mapping(cfg: RunConfig, scene: SceneSpec | None = None,
                log_file=None, progress=None) -> RunResult:
    """Full pipeline over the configured trajectory.

    ``log_file`` is an opened text stream for JSON-line event records;
    ``progress`` an optional callable taking (keyframe_count, frame_id).
    """
    scene = scene if scene is not None else cfg.build_scene()
    intr = cfg.camera.intrinsics()
    traj = make_trajectory(cfg)
    atlas = SubmapAtlas(cfg.submap_config(), seed=cfg.seed,
                        background=tuple(scene.background))
    rng_train = np.random.default_rng(np.random.SeedSequence(cfg.seed + 1))

    tk = cfg.tracking
    pose_table: dict[int, Pose] = {}   # best current estimates (published)
    raw_est: dict[int, Pose] = {}      # tracker output before any correction
    gt_table: dict[int, Pose] = {}
    timestamps: dict[int, float] = {}
    odometry_edges: list[tuple[int, int, Pose]] = []
    loop_pairs: list[tuple[int, int]] = []
    loop_events: list[LoopEvent] = []
    keyframe_stats: list[KeyframeStat] = []
    training_seconds = 0.0
    correction = Pose.identity()  # broadcast of the last closure to new frames
    last_kf_pose: Pose | None = None
    last_kf_id: int | None = None
    last_loop_at = -(10**9)

    def log(record: dict):
        if log_file is not None:
            log_file.write(json.dumps(record) + "\n")
            log_file.flush()

    for _ in range(len(traj)):
        frame_id, gt_pose, raw_pose = traj.next_frame()
        est_pose = compose(correction, raw_pose)
        if not is_keyframe(
            last_kf_pose, est_pose,
            tk.keyframe_translation, np.deg2rad(tk.keyframe_rotation_deg),
        ):
            continue
        rgb, depth = render_gt_frame(scene, gt_pose, intr)
        kf = KeyframePacket(
            kf_id=frame_id, rgb=rgb, depth=depth, intrinsics=intr,
            pose=est_pose, timestamp=traj.timestamp(frame_id),
        )
        pose_table[frame_id] = est_pose
        raw_est[frame_id] = raw_pose
        gt_table[frame_id] = gt_pose
        timestamps[frame_id] = kf.timestamp
        if last_kf_id is not None:
            # odometry measurements come from the uncorrected tracker chain
            odometry_edges.append(
                (last_kf_id, frame_id,
                 compose(raw_est[last_kf_id].inverse(), raw_pose))
            )
        last_kf_pose = est_pose
        last_kf_id = frame_id

        if not (depth > 0).any():
            # degenerate view (no valid depth): keep the pose, skip mapping
            log({"event": "skipped_keyframe", "kf_id": frame_id})
            continue
        t0 = time.perf_counter()
        submap_id = atlas.select_local_map(kf)
        sm = atlas.get(submap_id)
        sm.integrate_keyframe(kf)
        try:
            report = sm.train(
                cfg.mapping.pixels_per_step, rng_train,
                iterations=cfg.mapping.iterations_per_keyframe,
                focus_kf_id=frame_id,
            )
        except ValueError as exc:
            report = None
            log({"event": "train_skipped", "kf_id": frame_id, "reason": str(exc)})
        dt_map = time.perf_counter() - t0
        training_seconds += dt_map
        keyframe_stats.append(KeyframeStat(
            kf_id=frame_id, submap_count=len(atlas),
            node_count=sum(s.grid.node_count() for s in atlas.submaps),
            mapping_seconds=dt_map,
        ))
        log({
            "event": "keyframe", "kf_id": frame_id, "submap": submap_id,
            "mapping_seconds": round(dt_map, 6),
            "loss_total": report.total if report else None,
            "submap_count": len(atlas),
            "node_count": keyframe_stats[-1].node_count,
        })
        if progress is not None:
            progress(len(pose_table), frame_id)

        match = detect_loop(
            gt_pose, gt_table, frame_id,
            tk.loop_radius, np.deg2rad(tk.loop_angle_deg), tk.loop_window,
        )
        if match is not None:
            loop_pairs.append((match, frame_id))
        if (match is not None and tk.loop_enabled
                and len(pose_table) - last_loop_at > tk.loop_cooldown):
            last_loop_at = len(pose_table)
            updated = close_loop(
                pose_table, gt_table, odometry_edges, loop_pairs,
                tk.loop_edge_weight,
            )
            t_adj = time.perf_counter()
            moved = atlas.adjust_submaps(updated)
            adjust_seconds = time.perf_counter() - t_adj
            t_ft = time.perf_counter()
            reports = atlas.finetune_submaps(
                updated, cfg.submaps.finetune_budget,
                cfg.mapping.pixels_per_step, rng_train,
            )
            finetune_seconds = time.perf_counter() - t_ft
            training_seconds += finetune_seconds
            pose_table = updated
            correction = compose(updated[frame_id], raw_est[frame_id].inverse())
            last_kf_pose = pose_table[frame_id]
            event = LoopEvent(
                kf_id=frame_id, matched_kf_id=match,
                adjust_seconds=adjust_seconds,
                finetune_seconds=finetune_seconds,
                anchors_moved=moved, submaps_finetuned=len(reports),
            )
            loop_events.append(event)
            log({
                "event": "loop_closure", "kf_id": frame_id, "matched": match,
                "adjust_seconds": round(adjust_seconds, 6),
                "finetune_seconds": round(finetune_seconds, 6),
                "anchors_moved": moved, "submaps_finetuned": len(reports),
            })

    if cfg.mapping.final_consolidation_iters > 0:
        m = cfg.mapping.consolidation_pixels or cfg.mapping.pixels_per_step
        t0 = time.perf_counter()
        for sm in atlas.submaps:
            sm.retrain_members(m, rng_train, cfg.mapping.final_consolidation_iters)
        dt = time.perf_counter() - t0
        training_seconds += dt
        log({"event": "consolidation", "seconds": round(dt, 3),
             "iterations": cfg.mapping.final_consolidation_iters})

    return RunResult(
        atlas=atlas, pose_table=pose_table, gt_poses=gt_table,
        timestamps=timestamps, loop_events=loop_events,
        training_seconds=training_seconds, keyframe_count=len(pose_table),
        raw_estimates=raw_est, odometry_edges=odometry_edges,
        loop_pairs=loop_pairs, keyframe_stats=keyframe_stats,
    )


def close_loop(pose_table, gt_table, odometry_edges, loop_pairs,
               loop_weight: float = 100.0) -> dict[int, Pose]:
    """Pose-graph optimization standing in for global bundle adjustment.

    Odometry edges carry the (drifted) tracker increments; loop edges
    carry the true relative pose of the matched pair, as a feature-based
    back-end would recover.  Returns a complete new pose table.
    """
    graph = PoseGraph()
    for kf_id, pose in pose_table.items():
        graph.add_node(kf_id, pose)
    for i, j, rel in odometry_edges:
        graph.add_edge(i, j, rel, weight=1.0, kind="odometry")
    for i, j in loop_pairs:
        rel_true = compose(gt_table[i].inverse(), gt_table[j])
        graph.add_edge(i, j, rel_true, weight=loop_weight, kind="loop")
    optimized, _ = optimize_pose_graph(graph, gauge_id=min(pose_table))
    return optimized


def simulate_frames(cfg: RunConfig, out_dir: Path, scene: SceneSpec | None = None):
    """Write ground-truth RGB-D frames and both trajectory files."""
    from .images import write_depth_pgm, write_ppm

    scene = scene if scene is not None else cfg.build_scene()
    intr = cfg.camera.intrinsics()
    traj = make_trajectory(cfg)
    out_dir = Path(out_dir)
    frames_dir = out_dir / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    gt_records, est_records = [], []
    for _ in range(len(traj)):
        frame_id, gt_pose, est_pose = traj.next_frame()
        rgb, depth = render_gt_frame(scene, gt_pose, intr)
        write_ppm(frames_dir / f"frame_{frame_id:05d}_color.ppm", rgb)
        write_depth_pgm(frames_dir / f"frame_{frame_id:05d}_depth.pgm", depth)
        ts = traj.timestamp(frame_id)
        gt_records.append((ts, gt_pose))
        est_records.append((ts, est_pose))
    save_trajectory(out_dir / "trajectory_gt.txt", gt_records)
    save_trajectory(out_dir / "trajectory_est.txt", est_records)
    return len(gt_records)


def sample_eval_poses(cfg: RunConfig, scene: SceneSpec,
                      keyframe_poses: dict[int, Pose], n_views: int,
                      seed_offset: int = 97) -> list[Pose]:
    """Held-out views near the visited free space.

    Perturbs random keyframe poses by a bounded offset and yaw, keeping
    the configured clearance from scene surfaces.
    """
    rng = np.random.default_rng(cfg.seed + seed_offset)
    ids = sorted(keyframe_poses)
    ev = cfg.eval
    poses = []
    guard = 0
    while len(poses) < n_views and guard < 100 * n_views:
        guard += 1
        base = keyframe_poses[ids[int(rng.integers(0, len(ids)))]]
        offset = rng.uniform(-ev.view_offset, ev.view_offset, 3)
        yaw = np.deg2rad(rng.uniform(-ev.view_yaw_deg, ev.view_yaw_deg))
        c, s = np.cos(yaw), np.sin(yaw)
        r_yaw = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        pos = base.translation + offset
        d, _ = sdf_points(scene, pos[None])
        if d[0] < ev.min_clearance:
            continue
        poses.append(Pose(r_yaw @ base.rotation, pos))
    if len(poses) < n_views:
        raise ValueError("could not sample enough clear evaluation poses")
    return poses


def evaluate_views(atlas: SubmapAtlas, scene: SceneSpec, intr: Intrinsics,
                   poses: list[Pose]) -> list[dict]:
    """Per-view metric records against the scene oracle.

    Depth L1 counts unobserved predicted pixels at their (zero) depth so
    empty maps are penalized rather than rewarded.
    """
    records = []
    for i, pose in enumerate(poses):
        gt_rgb, gt_depth = render_gt_frame(scene, pose, intr)
        fused = atlas.render_fused(pose, intr)
        valid = gt_depth > 0
        rec = {
            "view": i,
            "depth_l1_cm": mx.depth_l1(fused.depth, gt_depth, valid),
            "psnr_db": mx.psnr(fused.color, gt_rgb),
            "ssim": mx.ssim(fused.color, gt_rgb),
            "variance": float(fused.variance.mean()),
            "observed_fraction": float(fused.observed.mean()),
        }
        records.append(rec)
    return records


def evaluate_run(cfg: RunConfig, atlas: SubmapAtlas, pose_table: dict[int, Pose],
                 scene: SceneSpec | None = None,
                 gt_poses: dict[int, Pose] | None = None) -> dict:
    """End-of-run metrics: view quality, uncertainty correlation, ATE."""
    scene = scene if scene is not None else cfg.build_scene()
    intr = cfg.camera.intrinsics()
    if gt_poses is None:
        traj = make_trajectory(cfg)
        gt_poses = {i: traj.gt_pose(i) for i in pose_table}
    views = sample_eval_poses(cfg, scene, gt_poses, cfg.eval.n_views)
    records = evaluate_views(atlas, scene, intr, views)
    summary = {
        "n_views": len(records),
        "depth_l1_cm": float(np.mean([r["depth_l1_cm"] for r in records])),
        "psnr_db": float(np.mean([r["psnr_db"] for r in records])),
        "ssim": float(np.mean([r["ssim"] for r in records])),
        "mean_variance": float(np.mean([r["variance"] for r in records])),
    }
    ids = sorted(set(pose_table) & set(gt_poses))
    if len(ids) >= 3:
        est = np.array([pose_table[i].translation for i in ids])
        gt = np.array([gt_poses[i].translation for i in ids])
        summary["ate_rmse_cm"] = mx.ate_rmse(est, gt)
    try:
        summary.update(mx.uncertainty_correlation(records))
    except ValueError:
        pass
    return {"views": records, "summary": summary}
