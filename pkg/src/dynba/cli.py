"""Command-line interface: ``dynba <subcommand> ...``.

Exit status is 0 on success, 1 when a stage fails (a JSON error record is
written to stderr) and 2 for usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import fileio
from .ba import BAConfig, run_sliding
from .errors import DynBAError
from .pipeline import (EvalOptions, PipelineConfig, StageError, evaluate, export_pointcloud, metrics_line,
                       run_pipeline, write_ba_outputs, write_ba_report, write_refine_outputs,
                       write_scene)
from .refine import RefineConfig, refine
from .synth import SceneConfig, corrupt_depth, corrupt_tracks, generate

log = logging.getLogger("dynba")


def _load_json(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config not found: {p}")
    return json.loads(p.read_text())


def _workers(threads):
    return (os.cpu_count() or 1) if threads == 0 else max(1, threads)


def cmd_synth(args):
    d = _load_json(args.config)
    cfg = SceneConfig.from_dict(d)
    if args.seed is not None:
        cfg.seed = args.seed
    gt = generate(cfg)
    noise = cfg.track_noise
    tracks = corrupt_tracks(gt, noise, cfg.seed) if (noise.pixel_sigma or noise.depth_sigma
                                                     or noise.label_flip) else gt.tracks
    write_scene(args.out, gt, tracks, corrupt_depth(gt, cfg.depth_corruption, cfg.seed))
    log.info("wrote synthetic scene (%d frames, %d queries/frame) to %s",
             cfg.num_frames, cfg.queries_per_frame, args.out)


def cmd_decouple(args):
    tracks = fileio.read_tracks(args.tracks)
    fileio.write_tracks(args.out, tracks.decoupled())


def cmd_ba(args):
    tracks = fileio.read_tracks(args.tracks)
    k = fileio.read_intrinsics(args.intrinsics) if args.intrinsics else tracks.intrinsics
    if k is None:
        raise ValueError("no intrinsics: pass --intrinsics or use a track file that embeds them")
    cfg = BAConfig.from_dict(_load_json(args.config))
    if args.mode:
        cfg = BAConfig.from_dict({**cfg.to_dict(), "mode": args.mode})
    priors = fileio.read_query_depths(args.priors) if args.priors else None
    init = fileio.read_tum(args.init)[1] if args.init else None
    if not (args.out or args.out_poses or args.out_depths):
        raise ValueError("give --out DIR and/or --out-poses/--out-depths")
    est = run_sliding(tracks, k, cfg, priors=priors, init_poses=init, workers=_workers(args.threads))
    if args.out:
        write_ba_outputs(args.out, est)
    if args.out_poses:
        fileio.write_tum(args.out_poses, est.poses)
    if args.out_depths:
        fileio.write_query_depths(args.out_depths, est.depths)
    if args.report:
        write_ba_report(args.report, est)


def cmd_refine(args):
    tracks = fileio.read_tracks(args.tracks)
    k = fileio.read_intrinsics(args.intrinsics) if args.intrinsics else tracks.intrinsics
    if k is None:
        raise ValueError("no intrinsics: pass --intrinsics or use a track file that embeds them")
    depths = fileio.read_depth_dir(args.depths)
    cfg = RefineConfig.from_dict(_load_json(args.config))
    if args.seed is not None:
        cfg.seed = args.seed
    ba_depths = fileio.read_query_depths(Path(args.ba) / "depths.bin")
    res = refine(depths, tracks, ba_depths, cfg, k)
    write_refine_outputs(args.out, res)


def cmd_eval(args):
    t_est, est = fileio.read_tum(args.est)
    t_gt, gt = fileio.read_tum(args.gt)
    depth_est = fileio.read_depth_dir(args.depth_est) if args.depth_est else None
    depth_gt = fileio.read_depth_dir(args.depth_gt) if args.depth_gt else None
    if (depth_est is None) != (depth_gt is None):
        raise ValueError("--depth-est and --depth-gt must be given together")
    out = Path(args.out) if args.out else Path(args.est).resolve().parent / "eval"
    opts = EvalOptions(relative_step=args.step, per_frame_alignment=args.per_frame_alignment,
                       plots=not args.no_plots)
    times = (t_est, t_gt) if len(est) != len(gt) else (None, None)
    row = evaluate(est, gt, out, opts, depth_est, depth_gt, est_times=times[0], gt_times=times[1])
    print("ate,rte,rre,abs_rel,delta_1.25")
    print(metrics_line(row))


def cmd_pipeline(args):
    cfg = PipelineConfig.from_dict(_load_json(args.config))
    d = cfg.to_dict()
    if args.out:
        d["output_dir"] = args.out
    if args.seed is not None:
        d["seed"] = args.seed
    cfg = PipelineConfig.from_dict(d)
    manifest = run_pipeline(cfg, workers=_workers(args.threads))
    if manifest["metrics"]:
        print("ate,rte,rre,abs_rel,delta_1.25")
        print(metrics_line(manifest["metrics"]))


def cmd_export_ply(args):
    _, poses = fileio.read_tum(args.traj)
    depths = fileio.read_depth_dir(args.depths)
    k = fileio.read_intrinsics(args.intrinsics)
    n = export_pointcloud(poses, depths, k, args.stride, args.out)
    log.info("wrote %d points to %s", n, args.out)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="root random seed")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="worker threads (0 = all cores); results do not depend on it")
    common.add_argument("--log-level", default=argparse.SUPPRESS,
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = argparse.ArgumentParser(prog="dynba", parents=[common],
                                     description="Bundle adjustment with decoupled point tracks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic scene")
    p.add_argument("--config", help="scene JSON (defaults when omitted)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("decouple", parents=[common], help="replace total tracks by their static component")
    p.add_argument("--tracks", required=True)
    p.add_argument("--out", required=True, help=".trk.json or .trk.bin")
    p.set_defaults(func=cmd_decouple)

    p = sub.add_parser("ba", parents=[common], help="sliding-window bundle adjustment")
    p.add_argument("--tracks", required=True)
    p.add_argument("--intrinsics")
    p.add_argument("--config")
    p.add_argument("--mode", help="override BA mode (a, b, e, f or full name)")
    p.add_argument("--priors", help="depths.bin with prior query depths (default: track query depths)")
    p.add_argument("--init", help="TUM trajectory used to initialize poses")
    p.add_argument("--out", help="directory receiving traj.txt, depths.bin and report.json")
    p.add_argument("--out-poses")
    p.add_argument("--out-depths")
    p.add_argument("--report")
    p.set_defaults(func=cmd_ba)

    p = sub.add_parser("refine", parents=[common], help="dense depth refinement with scale grids")
    p.add_argument("--depths", required=True, help="directory of PFM depth maps")
    p.add_argument("--tracks", required=True)
    p.add_argument("--ba", required=True, help="BA output directory (depths.bin)")
    p.add_argument("--intrinsics")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("eval", parents=[common], help="trajectory and depth metrics")
    p.add_argument("--est", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--depth-est")
    p.add_argument("--depth-gt")
    p.add_argument("--step", type=int, default=1, help="frame step of relative errors")
    p.add_argument("--per-frame-alignment", action="store_true")
    p.add_argument("--no-plots", action="store_true")
    p.add_argument("--out", help="directory for CSV and PNG outputs")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", parents=[common], help="run all stages from one config")
    p.add_argument("--config")
    p.add_argument("--out", help="override output_dir")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("export-ply", parents=[common], help="fuse depth maps into a PLY point cloud")
    p.add_argument("--traj", required=True)
    p.add_argument("--depths", required=True)
    p.add_argument("--intrinsics", required=True)
    p.add_argument("--stride", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_ply)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.seed = getattr(args, "seed", None)
    args.threads = getattr(args, "threads", 1)
    level = getattr(args, "log_level", "WARNING")
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        parser.error("--seed must be an unsigned 64-bit integer")
    if args.threads < 0:
        parser.error("--threads must be >= 0")
    try:
        args.func(args)
    except StageError as e:
        print(json.dumps(e.to_dict()), file=sys.stderr)
        return 1
    except (DynBAError, ValueError, OSError, np.linalg.LinAlgError) as e:
        record = {"stage": args.command, "error": type(e).__name__, "message": str(e)}
        print(json.dumps(record), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
