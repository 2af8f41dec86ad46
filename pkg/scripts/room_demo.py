#!/usr/bin/env python3
"""Small end-to-end demo: map a checker room, report metrics, render.

Runs a reduced-budget loop trajectory through the default room, prints
the end-of-run metric summary, and writes a few fused renders next to
the checkpoint.  Takes a couple of minutes on a laptop CPU.
"""

import argparse
import json
import time
from pathlib import Path

from octmap import checkpoint as ck
from octmap import pipeline
from octmap.config import config_from_dict, config_hash, scene_hash
from octmap.images import write_depth_pgm, write_ppm, write_variance_pgm

DEMO = {
    "seed": 1,
    "camera": {"width": 96, "height": 72, "fx": 84.0, "fy": 84.0,
               "cx": 47.5, "cy": 35.5},
    "trajectory": {
        "n_frames": 220,
        "trans_noise": 0.002,
        "waypoints": [
            [-1.5, -1.5, 1.4], [1.5, -1.5, 1.4], [1.5, 1.5, 1.4],
            [-1.5, 1.5, 1.4], [-1.5, -1.5, 1.4], [0.9, -1.5, 1.4],
        ],
    },
    "mapping": {"pixels_per_step": 1200, "iterations_per_keyframe": 6,
                "n_point": 4},
    "eval": {"n_views": 8},
}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/demo")
    ap.add_argument("--seed", type=int, default=None)
    args = ap.parse_args()

    cfg = config_from_dict(DEMO)
    if args.seed is not None:
        cfg.seed = args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene = cfg.build_scene()

    t0 = time.time()
    result = pipeline.run_mapping(
        cfg, scene,
        progress=lambda n, f: print(f"  keyframe {n} (frame {f})", flush=True)
        if n % 10 == 0 else None,
    )
    print(f"mapping finished in {time.time() - t0:.0f}s: "
          f"{result.keyframe_count} keyframes, {len(result.atlas)} submaps, "
          f"{len(result.loop_events)} loop events")

    report = pipeline.evaluate_run(cfg, result.atlas, result.pose_table,
                                   scene, result.gt_poses)
    print(json.dumps(report["summary"], indent=2))

    ck.save_checkpoint(out / "checkpoint.bin", result.atlas, result.pose_table,
                       config_hash(cfg), scene_hash(cfg), result.timestamps)
    intr = cfg.camera.intrinsics()
    ids = sorted(result.pose_table)
    for i, kf_id in enumerate(ids[:: max(1, len(ids) // 4)][:4]):
        fused = result.atlas.render_fused(result.pose_table[kf_id], intr)
        write_ppm(out / f"view_{i}_color.ppm", fused.color)
        write_depth_pgm(out / f"view_{i}_depth.pgm", fused.depth)
        write_variance_pgm(out / f"view_{i}_variance.pgm", fused.variance)
    print(f"checkpoint and renders written to {out}")


if __name__ == "__main__":
    main()
