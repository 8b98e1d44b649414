"""End-to-end driver: tracks -> decoupling -> bundle adjustment -> refinement -> evaluation.

Inputs are either generated (synthetic mode) or read from files (file mode).
Every stage writes its artifacts under ``output_dir``; ``manifest.json``
records the config hash, package versions, seeds and per-stage wall time.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import platform
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import fileio, plots
from .ba import BAConfig, run_sliding
from .errors import DynBAError
from .geometry import CameraIntrinsics, back_project, poses_to_arrays, se3_retract
from .metrics import DepthEvalPair, align, depth_scores, relative_errors, trajectory_pair, translation_errors
from .refine import RefineConfig, refine
from .seeding import substream
from .synth import SceneConfig, corrupt_depth, corrupt_tracks, generate

log = logging.getLogger(__name__)

UINT64_MAX = 2 ** 64 - 1


class StageError(RuntimeError):
    """Failure inside one pipeline stage; carries the stage name and the original error."""

    def __init__(self, stage: str, error: BaseException):
        super().__init__(f"stage '{stage}' failed: {error}")
        self.stage = stage
        self.error = error

    def to_dict(self) -> dict:
        d = {"stage": self.stage, "error": type(self.error).__name__, "message": str(self.error)}
        for attr in ("diagnostics", "frame", "count", "term", "filename"):
            val = getattr(self.error, attr, None)
            if val is not None:
                d[attr] = val if isinstance(val, (int, float, str)) else repr(val)
        return d


@dataclass
class EvalOptions:
    relative_step: int = 1
    tau: float = 1.25
    per_frame_alignment: bool = False
    plots: bool = True


@dataclass
class InitOptions:
    """Pose initialization: ``none`` (constant velocity), ``gt`` or ``perturbed-gt`` (synthetic only)."""
    source: str = "none"
    rotation_deg: float = 2.0
    translation: float = 0.05

    def __post_init__(self):
        if self.source not in ("none", "gt", "perturbed-gt"):
            raise ValueError(f"unknown init source {self.source!r}")


@dataclass
class FileInputs:
    tracks: str
    intrinsics: str | None = None
    depth_dir: str | None = None
    gt_trajectory: str | None = None
    gt_depth_dir: str | None = None


def _from_dict(cls, d):
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**d)


@dataclass
class PipelineConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    ba: BAConfig = field(default_factory=BAConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    eval: EvalOptions = field(default_factory=EvalOptions)
    init: InitOptions = field(default_factory=InitOptions)
    inputs: FileInputs | None = None
    output_dir: str = "out"
    seed: int = 0
    run_refine: bool = True

    def __post_init__(self):
        if not (isinstance(self.seed, int) and 0 <= self.seed <= UINT64_MAX):
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")
        # the root seed drives every stream
        self.scene.seed = self.seed
        self.refine.seed = self.seed

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown pipeline fields: {sorted(unknown)}")
        kw = {}
        if "scene" in d:
            kw["scene"] = SceneConfig.from_dict(d.pop("scene"))
        if "ba" in d:
            kw["ba"] = BAConfig.from_dict(d.pop("ba"))
        if "refine" in d:
            kw["refine"] = RefineConfig.from_dict(d.pop("refine"))
        for name, sub in (("eval", EvalOptions), ("init", InitOptions)):
            if name in d:
                kw[name] = _from_dict(sub, d.pop(name))
        if d.get("inputs") is not None:
            kw["inputs"] = _from_dict(FileInputs, d.pop("inputs"))
        d.pop("inputs", None)
        kw.update(d)
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {
            "scene": self.scene.to_dict(),
            "ba": self.ba.to_dict(),
            "refine": self.refine.to_dict(),
            "eval": asdict(self.eval),
            "init": asdict(self.init),
            "inputs": asdict(self.inputs) if self.inputs else None,
            "output_dir": self.output_dir,
            "seed": self.seed,
            "run_refine": self.run_refine,
        }

    def semantic_hash(self) -> str:
        """SHA-256 of every field that can change results (the output directory is excluded)."""
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def versions() -> dict:
    import matplotlib
    import scipy

    from . import __version__
    return {"dynba": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "matplotlib": matplotlib.__version__}


def export_pointcloud(poses, depth_maps, k: CameraIntrinsics, stride: int, path, frames=None):
    """Back-project every ``stride``-th pixel of each depth map into world space and write a PLY."""
    depth_maps = np.asarray(depth_maps, dtype=float)
    if len(poses) != len(depth_maps):
        raise ValueError(f"{len(poses)} poses but {len(depth_maps)} depth maps")
    if stride < 1:
        raise ValueError("stride must be at least 1")
    L, H, W = depth_maps.shape
    vv, uu = np.meshgrid(np.arange(0, H, stride), np.arange(0, W, stride), indexing="ij")
    pts, ids = [], []
    frames = range(L) if frames is None else frames
    for f in frames:
        d = depth_maps[f, vv, uu]
        ok = np.isfinite(d) & (d > 0)
        p = np.stack([uu[ok], vv[ok], d[ok]], axis=-1).astype(float)
        pts.append(poses[f].apply(back_project(p, k)) if len(p) else np.zeros((0, 3)))
        ids.append(np.full(len(p), f, dtype=np.int32))
    points = np.concatenate(pts)
    fileio.write_ply(path, points, np.concatenate(ids))
    return len(points)


# -- stages -----------------------------------------------------------------

def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x):
    return f"{x:.9g}"


def write_ba_report(path, est):
    report = {"windows": [{"start": r.start, "stop": r.stop, "costs": r.costs, "accepted": r.accepted,
                           "rejected": r.rejected, "dropped_behind": r.dropped_behind,
                           "residuals": r.num_residuals} for r in est.reports]}
    Path(path).write_text(json.dumps(report, indent=1) + "\n")


def write_ba_outputs(directory, est):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    fileio.write_tum(directory / "traj.txt", est.poses)
    fileio.write_query_depths(directory / "depths.bin", est.depths)
    write_ba_report(directory / "report.json", est)


def write_refine_outputs(directory, result):
    directory = Path(directory)
    fileio.write_depth_dir(directory, result.depth_maps)
    grids = {"grid_size": list(result.grids[0].values.shape),
             "grids": [g.values.tolist() for g in result.grids],
             "best_step": result.best_step, "skipped_frame_pairs": result.skipped_frame_pairs}
    (directory / "grids.json").write_text(json.dumps(grids) + "\n")
    _write_csv(directory / "loss.csv", ["step", "loss"], [(i, _fmt(v)) for i, v in enumerate(result.loss_curve)])


def evaluate(est_poses, gt_poses, out_dir, options: EvalOptions | None = None,
             depth_est=None, depth_gt=None, depth_prior=None, est_times=None, gt_times=None) -> dict:
    """Compute metrics, write ``metrics.csv`` plus per-frame CSVs and figures; return the metric row."""
    options = options or EvalOptions()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pair = trajectory_pair(est_poses, gt_poses, est_times, gt_times)
    terr = translation_errors(pair)
    rt, rr = relative_errors(pair, options.relative_step)
    row = {"ate": float(np.sqrt(np.mean(terr ** 2))), "rte": float(np.mean(rt)), "rre": float(np.mean(rr)),
           "abs_rel": float("nan"), "delta_1.25": float("nan")}

    step = options.relative_step
    frame_rows = []
    for f in range(len(terr)):
        rel = (_fmt(rt[f]), _fmt(rr[f])) if f < len(rt) else ("", "")
        frame_rows.append((f, _fmt(terr[f]), *rel))
    _write_csv(out_dir / "trajectory_errors.csv",
               ["frame", "ate_error", f"rte_step{step}", f"rre_step{step}"], frame_rows)

    if depth_est is not None and depth_gt is not None:
        scores = depth_scores(DepthEvalPair(list(depth_est), list(depth_gt)), options.tau,
                              options.per_frame_alignment)
        row["abs_rel"], row["delta_1.25"] = scores.abs_rel, scores.delta
        prior = None
        if depth_prior is not None:
            prior = depth_scores(DepthEvalPair(list(depth_prior), list(depth_gt)), options.tau,
                                 options.per_frame_alignment)
            row["abs_rel_prior"], row["delta_1.25_prior"] = prior.abs_rel, prior.delta
        depth_rows = []
        for f, (ar, dl, _) in enumerate(scores.per_frame):
            r = [f, _fmt(ar), _fmt(dl)]
            if prior is not None and prior.per_frame:
                r += [_fmt(prior.per_frame[f][0]), _fmt(prior.per_frame[f][1])]
            depth_rows.append(r)
        header = ["frame", "abs_rel", "delta_1.25"] + (["abs_rel_prior", "delta_1.25_prior"] if prior else [])
        if scores.per_frame:
            _write_csv(out_dir / "depth_errors.csv", header, depth_rows)

    main_cols = ["ate", "rte", "rre", "abs_rel", "delta_1.25"]
    _write_csv(out_dir / "metrics.csv", main_cols, [[_fmt(row[c]) for c in main_cols]])

    if options.plots:
        aligned, _ = align(pair)
        _, est_t = poses_to_arrays(aligned)
        _, gt_t = poses_to_arrays(pair.ground_truth)
        plots.plot_trajectories(est_t, gt_t, out_dir / "trajectory.png")
        plots.plot_frame_errors(np.arange(len(terr)), terr, out_dir / "trajectory_errors.png",
                                "position error [m]")
    return row


def metrics_line(row: dict) -> str:
    return ",".join(_fmt(row[c]) for c in ("ate", "rte", "rre", "abs_rel", "delta_1.25"))


def perturb_poses(poses, opts: InitOptions, seed: int):
    """Ground-truth poses with a random bounded twist each (rotation and translation up to the limits)."""
    if opts.source == "gt":
        return list(poses)
    rng = substream(seed, "init-perturbation")
    out = []
    for p in poses:
        phi = rng.normal(size=3)
        phi *= np.radians(opts.rotation_deg) * rng.uniform() / np.linalg.norm(phi)
        rho = rng.normal(size=3)
        rho *= opts.translation * rng.uniform() / np.linalg.norm(rho)
        out.append(se3_retract(p, np.concatenate([rho, phi])))
    return out


class _Timer:
    def __init__(self, timings: dict, name: str):
        self.timings, self.name = timings, name

    def __enter__(self):
        self.t0 = time.perf_counter()
        log.info("stage %s", self.name)

    def __exit__(self, *exc):
        self.timings[self.name] = round(time.perf_counter() - self.t0, 6)


def run_pipeline(cfg: PipelineConfig, workers: int = 1) -> dict:
    """Run all stages; returns the manifest. Raises :class:`StageError` on failure."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    timings = {}

    def run(name, fn):
        with _Timer(timings, name):
            try:
                return fn()
            except (DynBAError, ValueError, OSError, np.linalg.LinAlgError) as e:
                raise StageError(name, e) from e

    gt = None
    if cfg.inputs is None:
        def synth_stage():
            g = generate(cfg.scene)
            noise = cfg.scene.track_noise
            tracks = corrupt_tracks(g, noise, cfg.seed) if (noise.pixel_sigma or noise.depth_sigma
                                                            or noise.label_flip) else g.tracks
            corr = corrupt_depth(g, cfg.scene.depth_corruption, cfg.seed)
            d = out / "scene"
            write_scene(d, g, tracks, corr)
            return g, tracks, corr.depth_maps
        gt, tracks, depth_prior = run("synth", synth_stage)
        k = gt.intrinsics
        gt_poses, gt_depth = gt.poses, gt.depth_maps
    else:
        def load_stage():
            inp = cfg.inputs
            tr = fileio.read_tracks(inp.tracks)
            kk = fileio.read_intrinsics(inp.intrinsics) if inp.intrinsics else tr.intrinsics
            if kk is None:
                raise ValueError("intrinsics missing: pass inputs.intrinsics or embed them in the track file")
            dp = fileio.read_depth_dir(inp.depth_dir) if inp.depth_dir else None
            gp = fileio.read_tum(inp.gt_trajectory)[1] if inp.gt_trajectory else None
            gd = fileio.read_depth_dir(inp.gt_depth_dir) if inp.gt_depth_dir else None
            return tr, kk, dp, gp, gd
        tracks, k, depth_prior, gt_poses, gt_depth = run("load", load_stage)

    def decouple_stage():
        dec = tracks.decoupled()
        fileio.write_tracks(out / "tracks_decoupled.trk.bin", dec)
        return dec
    run("decouple", decouple_stage)

    def ba_stage():
        init = None
        if cfg.init.source != "none":
            if gt is None:
                raise ValueError("init from ground truth needs synthetic mode")
            init = perturb_poses(gt.poses, cfg.init, cfg.seed)
        est = run_sliding(tracks, k, cfg.ba, init_poses=init, workers=workers)
        write_ba_outputs(out / "ba", est)
        return est
    est = run("ba", ba_stage)

    refined = None
    if cfg.run_refine and depth_prior is not None:
        def refine_stage():
            res = refine(depth_prior, tracks, est.depths, cfg.refine, k)
            write_refine_outputs(out / "refine", res)
            if cfg.eval.plots:
                plots.plot_loss_curve(res.loss_curve, out / "refine" / "loss.png")
            return res.depth_maps
        refined = run("refine", refine_stage)

    row = None
    if gt_poses is not None:
        def eval_stage():
            return evaluate(est.poses, gt_poses, out / "eval", cfg.eval,
                            depth_est=refined if refined is not None else depth_prior,
                            depth_gt=gt_depth, depth_prior=depth_prior if refined is not None else None)
        row = run("eval", eval_stage)

    manifest = {
        "config_hash": cfg.semantic_hash(),
        "config": cfg.to_dict(),
        "versions": versions(),
        "seeds": {"root": cfg.seed, "streams": ["scene", "queries", "corruption", "track-noise",
                                                "init-perturbation", "rigid-pairs"]},
        "metrics": row,
        "timings": timings,
    }
    manifest["config"].pop("output_dir")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def write_scene(directory, gt, tracks=None, corrupted=None):
    """Synthetic scene on disk: GT trajectory and depth, tracks, intrinsics, optional corrupted depth."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    tracks = gt.tracks if tracks is None else tracks
    fileio.write_tum(d / "traj_gt.txt", gt.poses)
    fileio.write_depth_dir(d / "depth_gt", gt.depth_maps)
    fileio.write_intrinsics(d / "intrinsics.json", gt.intrinsics)
    fileio.write_tracks_json(d / "tracks.trk.json", tracks)
    fileio.write_tracks_bin(d / "tracks.trk.bin", tracks)
    manifest = {"seed": gt.config.seed, "scene": gt.config.to_dict()}
    if corrupted is not None:
        fileio.write_depth_dir(d / "depth", corrupted.depth_maps)
        manifest["corruption_grids"] = corrupted.grids.tolist()
    (d / "manifest.json").write_text(json.dumps(manifest) + "\n")

