"""Command-line entry points: simulate | run | render | mesh | eval.

Every command takes --config (YAML, see config.py for the schema) and
an output directory; exit code 0 on success, nonzero with a single
machine-parsable ``error: {...}`` JSON line on stderr otherwise.
--seed overrides the config seed; --threads caps per-render worker
threads (rendering is read-only, so results do not depend on it).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import checkpoint as ck
from . import mesh as mesh_mod
from . import pipeline
from .config import RunConfig, config_hash, load_config, save_config, scene_hash
from .images import write_depth_pgm, write_ppm, write_variance_pgm
from .tracking import load_trajectory, save_trajectory


def _load(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.output_dir = str(args.out)
    return cfg


def cmd_simulate(args) -> int:
    cfg = _load(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = pipeline.simulate_frames(cfg, out)
    print(f"wrote {n} frames and trajectories to {out}")
    return 0


def cmd_run(args) -> int:
    cfg = _load(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    scene = cfg.build_scene()
    log_path = out / "events.jsonl"
    with open(log_path, "w") as log_file:
        result = pipeline.run_mapping(
            cfg, scene, log_file,
            progress=lambda n, f: print(f"keyframe {n} (frame {f})", flush=True)
            if args.verbose else None,
        )
    ckpt_path = out / "checkpoint.bin"
    ck.save_checkpoint(
        ckpt_path, result.atlas, result.pose_table,
        config_hash(cfg), scene_hash(cfg), result.timestamps,
    )
    save_config(cfg, out / "config_used.yaml")
    ts = result.timestamps
    save_trajectory(out / "trajectory_est.txt",
                    [(ts[i], result.pose_table[i]) for i in sorted(result.pose_table)])
    save_trajectory(out / "trajectory_gt.txt",
                    [(ts[i], result.gt_poses[i]) for i in sorted(result.gt_poses)])
    report = pipeline.evaluate_run(cfg, result.atlas, result.pose_table,
                                   scene, result.gt_poses)
    with open(out / "metrics.jsonl", "w") as f:
        for rec in report["views"]:
            f.write(json.dumps(rec) + "\n")
        f.write(json.dumps({"summary": report["summary"]}) + "\n")
    print(json.dumps({
        "keyframes": result.keyframe_count,
        "submaps": len(result.atlas),
        "loop_events": len(result.loop_events),
        "training_seconds": round(result.training_seconds, 3),
        **{k: round(v, 4) if isinstance(v, float) else v
           for k, v in report["summary"].items()},
    }))
    return 0


def _load_checkpoint(args, cfg: RunConfig, check_scene: bool = False):
    expected = scene_hash(cfg) if check_scene else None
    return ck.load_checkpoint(
        args.checkpoint, cfg.submap_config(), expected_scene_hash=expected
    )


def cmd_render(args) -> int:
    cfg = _load(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    atlas, pose_table, timestamps, _, _ = _load_checkpoint(args, cfg)
    intr = cfg.camera.intrinsics()
    if args.poses is not None:
        poses = [p for _, p in load_trajectory(args.poses)]
    else:
        ids = sorted(pose_table)
        sel = ids[:: max(1, len(ids) // max(args.n_views, 1))][: args.n_views]
        poses = [pose_table[i] for i in sel]
    for i, pose in enumerate(poses):
        fused = atlas.render_fused(pose, intr, threads=args.threads)
        write_ppm(out / f"render_{i:04d}_color.ppm", fused.color)
        write_depth_pgm(out / f"render_{i:04d}_depth.pgm", fused.depth)
        write_variance_pgm(out / f"render_{i:04d}_variance.pgm", fused.variance)
    print(f"rendered {len(poses)} views to {out}")
    return 0


def cmd_mesh(args) -> int:
    cfg = _load(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    atlas, _, _, _, _ = _load_checkpoint(args, cfg)
    verts, faces, colors = mesh_mod.extract_mesh(atlas, resolution=args.resolution)
    path = out / "mesh.ply"
    mesh_mod.write_ply(path, verts, faces, colors)
    print(f"wrote {len(verts)} vertices / {len(faces)} faces to {path}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    atlas, pose_table, timestamps, _, _ = _load_checkpoint(args, cfg, check_scene=True)
    scene = cfg.build_scene()
    report = pipeline.evaluate_run(cfg, atlas, pose_table, scene)
    results_path = out / "metrics.jsonl"
    with open(results_path, "w") as f:
        for rec in report["views"]:
            f.write(json.dumps(rec) + "\n")
        f.write(json.dumps({"summary": report["summary"]}) + "\n")
    print(json.dumps(report["summary"]))
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="octmap",
        description="Multi-submap neural implicit RGB-D mapping",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", required=True, help="YAML run config")
        p.add_argument("--out", default=None, help="output directory override")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--threads", type=int, default=1,
                       help="render worker threads (results independent)")
        if checkpoint:
            p.add_argument("--checkpoint", required=True)

    common(sub.add_parser("simulate", help="write GT frames + trajectories"))
    p_run = sub.add_parser("run", help="full mapping pipeline")
    common(p_run)
    p_run.add_argument("--verbose", action="store_true")
    p_render = sub.add_parser("render", help="fused renders from a checkpoint")
    common(p_render, checkpoint=True)
    p_render.add_argument("--poses", default=None,
                          help="trajectory file of poses to render")
    p_render.add_argument("--n-views", type=int, default=4)
    p_mesh = sub.add_parser("mesh", help="marching-cubes mesh from a checkpoint")
    common(p_mesh, checkpoint=True)
    p_mesh.add_argument("--resolution", type=int, default=128)
    common(sub.add_parser("eval", help="metrics vs the scene oracle"), checkpoint=True)

    args = parser.parse_args(argv)
    handlers = {
        "simulate": cmd_simulate,
        "run": cmd_run,
        "render": cmd_render,
        "mesh": cmd_mesh,
        "eval": cmd_eval,
    }
    try:
        return handlers[args.command](args)
    except Exception as exc:  # single machine-parsable error line
        print(
            "error: " + json.dumps({"type": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
