"""Trajectory and depth accuracy metrics.

Trajectories are compared after a Sim(3) Umeyama alignment of the camera
centers. Relative errors use consecutive-frame motions (configurable step).
Depth maps are compared after one global scale and shift fitted jointly over
every valid pixel of the sequence.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .geometry import Sim3Transform, poses_to_arrays, rotation_angle_deg, umeyama_sim3

log = logging.getLogger(__name__)


@dataclass
class TrajectoryPair:
    estimated: list
    ground_truth: list
    timestamps: np.ndarray | None = None

    def __post_init__(self):
        if len(self.estimated) != len(self.ground_truth):
            raise ValueError(f"trajectory lengths differ: {len(self.estimated)} vs {len(self.ground_truth)}")
        if len(self.estimated) < 2:
            raise ValueError("need at least 2 poses")
        if self.timestamps is None:
            self.timestamps = np.arange(len(self.estimated), dtype=float)


def associate(est_times, gt_times, max_difference: float = 0.02):
    """Greedy nearest-timestamp matching; returns index pairs ``(est_idx, gt_idx)`` sorted by time."""
    est_times = np.asarray(est_times, dtype=float)
    gt_times = np.asarray(gt_times, dtype=float)
    cand = [(abs(a - b), i, j) for i, a in enumerate(est_times) for j, b in enumerate(gt_times)
            if abs(a - b) <= max_difference]
    cand.sort()
    used_e, used_g, pairs = set(), set(), []
    for _, i, j in cand:
        if i not in used_e and j not in used_g:
            used_e.add(i)
            used_g.add(j)
            pairs.append((i, j))
    pairs.sort()
    return [p[0] for p in pairs], [p[1] for p in pairs]


def align(pair: TrajectoryPair) -> tuple[list, Sim3Transform]:
    """Estimated poses mapped into the ground-truth frame by the Umeyama similarity."""
    est_t = np.array([p.t for p in pair.estimated])
    gt_t = np.array([p.t for p in pair.ground_truth])
    sim = umeyama_sim3(est_t, gt_t)
    return [sim.apply_pose(p) for p in pair.estimated], sim


def translation_errors(pair: TrajectoryPair) -> np.ndarray:
    """Per-frame distance between aligned estimate and ground truth."""
    aligned, _ = align(pair)
    est_t = np.array([p.t for p in aligned])
    gt_t = np.array([p.t for p in pair.ground_truth])
    return np.linalg.norm(est_t - gt_t, axis=1)


def ate(pair: TrajectoryPair) -> float:
    """RMSE of aligned camera positions (meters)."""
    e = translation_errors(pair)
    return float(np.sqrt(np.mean(e ** 2)))


def _relative_motions(poses, step):
    R, t = poses_to_arrays(poses)
    Ra, ta, Rb, tb = R[:-step], t[:-step], R[step:], t[step:]
    dR = np.einsum("nba,nbc->nac", Ra, Rb)
    dt = np.einsum("nba,nb->na", Ra, tb - ta)
    return dR, dt


def relative_errors(pair: TrajectoryPair, step: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Per-step translation (m) and rotation (deg) errors of frame-to-frame motions."""
    if step < 1 or step >= len(pair.estimated):
        raise ValueError(f"step must be in [1, {len(pair.estimated) - 1}]")
    aligned, _ = align(pair)
    dR_e, dt_e = _relative_motions(aligned, step)
    dR_g, dt_g = _relative_motions(pair.ground_truth, step)
    trans = np.linalg.norm(dt_e - dt_g, axis=1)
    rot = rotation_angle_deg(np.einsum("nab,ncb->nac", dR_e, dR_g))
    return trans, rot


def rte(pair: TrajectoryPair, step: int = 1) -> float:
    return float(np.mean(relative_errors(pair, step)[0]))


def rre(pair: TrajectoryPair, step: int = 1) -> float:
    return float(np.mean(relative_errors(pair, step)[1]))


@dataclass
class DepthEvalPair:
    predicted: list
    ground_truth: list
    masks: list | None = None

    def __post_init__(self):
        if len(self.predicted) != len(self.ground_truth):
            raise ValueError("predicted and ground-truth sequences differ in length")
        for p, g in zip(self.predicted, self.ground_truth):
            if np.shape(p) != np.shape(g):
                raise ValueError(f"depth map shapes differ: {np.shape(p)} vs {np.shape(g)}")
        gt_ok = [np.isfinite(g) & (np.asarray(g) > 0) for g in self.ground_truth]
        if self.masks is None:
            self.masks = gt_ok
        else:
            self.masks = [np.asarray(m, dtype=bool) & ok for m, ok in zip(self.masks, gt_ok)]
        self.masks = [m & np.isfinite(p) for p, m in zip(self.predicted, self.masks)]

    def valid(self):
        pred = np.concatenate([np.asarray(p, dtype=float)[m] for p, m in zip(self.predicted, self.masks)])
        gt = np.concatenate([np.asarray(g, dtype=float)[m] for g, m in zip(self.ground_truth, self.masks)])
        if pred.size == 0:
            raise DomainError("no valid pixels to evaluate")
        return pred, gt


def fit_scale_shift(pred, gt) -> tuple[float, float]:
    """Least-squares ``(s, b)`` minimizing ``sum (s * pred + b - gt)^2``."""
    A = np.stack([pred, np.ones_like(pred)], axis=1)
    (s, b), *_ = np.linalg.lstsq(A, gt, rcond=None)
    return float(s), float(b)


@dataclass
class DepthScores:
    abs_rel: float
    delta: float
    scale: float
    shift: float
    nonpositive: int
    per_frame: list = field(default_factory=list)


def _scores(pred, gt, tau):
    ok = pred > 0
    abs_rel = float(np.mean(np.abs(gt[ok] - pred[ok]) / gt[ok])) if ok.any() else float("nan")
    ratio = np.where(ok, np.maximum(gt / np.where(ok, pred, 1.0), pred / gt), np.inf)
    delta = 100.0 * float(np.mean(ratio < tau))
    return abs_rel, delta, int((~ok).sum())


def depth_scores(pair: DepthEvalPair, tau: float = 1.25, per_frame_alignment: bool = False) -> DepthScores:
    """Abs Rel and threshold accuracy after a joint (or per-frame) scale-shift alignment."""
    if per_frame_alignment:
        preds, gts = [], []
        for p, g, m in zip(pair.predicted, pair.ground_truth, pair.masks):
            if not m.any():
                continue
            pv, gv = np.asarray(p, float)[m], np.asarray(g, float)[m]
            s, b = fit_scale_shift(pv, gv)
            preds.append(s * pv + b)
            gts.append(gv)
        if not preds:
            raise DomainError("no valid pixels to evaluate")
        aligned, gt = np.concatenate(preds), np.concatenate(gts)
        scale, shift = float("nan"), float("nan")
    else:
        pred, gt = pair.valid()
        scale, shift = fit_scale_shift(pred, gt)
        aligned = scale * pred + shift
    abs_rel, delta, bad = _scores(aligned, gt, tau)
    if bad:
        log.warning("%d aligned depths are non-positive; excluded from abs_rel", bad)
    out = DepthScores(abs_rel, delta, scale, shift, bad)
    if not per_frame_alignment:
        for p, g, m in zip(pair.predicted, pair.ground_truth, pair.masks):
            if m.any():
                out.per_frame.append(_scores(scale * np.asarray(p, float)[m] + shift, np.asarray(g, float)[m], tau))
            else:
                out.per_frame.append((float("nan"), float("nan"), 0))
    return out


def abs_rel(pair: DepthEvalPair, per_frame_alignment: bool = False) -> float:
    return depth_scores(pair, per_frame_alignment=per_frame_alignment).abs_rel


def threshold_acc(pair: DepthEvalPair, tau: float = 1.25, per_frame_alignment: bool = False) -> float:
    """Percentage of valid pixels with ``max(gt/pred, pred/gt) < tau``."""
    return depth_scores(pair, tau, per_frame_alignment).delta


def trajectory_pair(estimated, ground_truth, est_times=None, gt_times=None, max_difference=0.02):
    """Build a :class:`TrajectoryPair`, associating by timestamp when both time lists are given."""
    if est_times is not None and gt_times is not None:
        ie, ig = associate(est_times, gt_times, max_difference)
        if len(ie) < 3:
            raise ValueError(f"only {len(ie)} poses could be associated by timestamp")
        return TrajectoryPair([estimated[i] for i in ie], [ground_truth[j] for j in ig],
                              np.asarray(gt_times, float)[ig])
    return TrajectoryPair(list(estimated), list(ground_truth))

