"""Sliding-window RGB-D bundle adjustment over camera poses and query depths.

Every track window contributes one residual per (source frame i, query n,
target frame j): the query pixel lifted at its current depth ``y`` in frame i
and reprojected into frame j, minus the tracked point in frame j. Residuals
are ``(du, dv, beta * dd)``. The objective is

    sum_e W_e * huber(|r_e|) + alpha * sum_n (y_n - d_n)^2

minimized by damped Gauss-Newton with IRLS weights. Depths only appear in
their own track's residuals, so the depth block of the normal equations is
diagonal and is eliminated with a Schur complement.

Confidence weights follow the configured mode. Soft weights ``v * (1 - m)``
(or ``v`` when labels are ignored) drive the depth update; in the ``*_mask``
modes the pose system additionally drops every residual whose visibility or
static confidence falls below ``delta_v`` / ``delta_m``.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import DynBAError, SolverFailureError, UnderConstrainedFrameError
from .geometry import CameraIntrinsics, Pose, poses_to_arrays, relative_pose, reproject, se3_compose, \
    se3_inverse, se3_retract
from .tracks import TrackTensor, pose_mask

log = logging.getLogger(__name__)

# Table-4 style presets: (trajectory source, hard pose mask, soft weights use the label)
MODES = {
    "total_no_mask": ("total", False, False),
    "total_mask": ("total", True, True),
    "decoupled_no_mask": ("decoupled", False, True),
    "decoupled_mask": ("decoupled", True, True),
}
MODE_ALIASES = {"a": "total_no_mask", "b": "total_mask", "e": "decoupled_no_mask", "f": "decoupled_mask"}


@dataclass
class BAConfig:
    window_frames: int = 15
    gn_iterations: int = 4
    alpha: float = 0.05
    huber_delta: float = 4.0
    huber_joint: bool = True
    depth_residual_weight: float = 1.0
    delta_v: float = 0.9
    delta_m: float = 0.9
    damping: float = 1e-4
    max_damping: float = 1e2
    mode: str = "decoupled_mask"
    track_radius: int | None = None
    depth_floor: float = 1e-3
    min_pose_terms: int = 10
    # early exit once an accepted step improves the cost by less than this fraction (or below the floor)
    cost_rtol: float = 1e-10
    cost_floor: float = 1e-18

    def __post_init__(self):
        self.mode = MODE_ALIASES.get(self.mode, self.mode)
        if self.mode not in MODES:
            raise ValueError(f"unknown BA mode {self.mode!r}")
        if self.window_frames < 2:
            raise ValueError("window_frames must be at least 2")
        if self.gn_iterations < 1:
            raise ValueError("gn_iterations must be at least 1")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if not self.huber_delta > 0:
            raise ValueError("huber_delta must be positive")
        if self.damping < 0:
            raise ValueError("damping must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BAConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown BA fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class WindowReport:
    start: int
    stop: int
    costs: list = field(default_factory=list)
    accepted: int = 0
    rejected: int = 0
    dropped_behind: int = 0
    num_residuals: int = 0
    damping: float = 0.0


@dataclass
class SceneEstimate:
    poses: list
    depths: np.ndarray
    reports: list = field(default_factory=list)

    def copy(self) -> "SceneEstimate":
        return SceneEstimate(list(self.poses), self.depths.copy(), list(self.reports))


def huber_weight(r_norm, delta):
    """IRLS weight of the Huber loss: 1 inside the knee, ``delta / r`` outside."""
    r_norm = np.asarray(r_norm, dtype=float)
    out = np.where(r_norm <= delta, 1.0, delta / np.maximum(r_norm, delta))
    return out if out.ndim else float(out)


def huber_cost(r_norm, delta):
    """Huber penalty scaled so that its IRLS weight is :func:`huber_weight` (``s^2`` inside the knee)."""
    r_norm = np.asarray(r_norm, dtype=float)
    return np.where(r_norm <= delta, r_norm ** 2, 2 * delta * r_norm - delta ** 2)


def residual(x, y, target, Ti: Pose, Tj: Pose, k: CameraIntrinsics, beta: float = 1.0):
    """Reprojection residual of pixel ``x`` at depth ``y`` against ``target``; zero when behind camera."""
    from .errors import BehindCameraError
    try:
        r = reproject(x, y, Ti, Tj, k) - np.asarray(target, dtype=float)
    except BehindCameraError:
        return np.zeros(3)
    r[..., 2] *= beta
    return r


@dataclass
class Linearization:
    r: np.ndarray        # (E, 3)
    J_i: np.ndarray      # (E, 3, 6) wrt right increment of the source pose
    J_j: np.ndarray      # (E, 3, 6) wrt right increment of the target pose
    J_y: np.ndarray      # (E, 3)
    ok: np.ndarray       # (E,) False when the point lands behind the target camera


def linearize(uv, y, target, Rrel, trel, same, k: CameraIntrinsics, beta=1.0, jacobians=True):
    """Residuals and analytic Jacobians for a batch of edges.

    ``Rrel, trel`` map source-camera coordinates into the target camera
    (``Tj^-1 Ti``). ``same`` marks edges whose source and target frame
    coincide; their reprojection is the identity and their pose Jacobians
    vanish.
    """
    E = len(y)
    ray = np.empty((E, 3))
    ray[:, 0] = (uv[:, 0] - k.cx) / k.fx
    ray[:, 1] = (uv[:, 1] - k.cy) / k.fy
    ray[:, 2] = 1.0
    Rray = np.einsum("eab,eb->ea", Rrel, ray, optimize=False)
    q = Rray * y[:, None] + trel
    ok = (q[:, 2] > 1e-9) | same
    z = np.where(ok, q[:, 2], 1.0)
    proj = np.stack([k.fx * q[:, 0] / z + k.cx, k.fy * q[:, 1] / z + k.cy, q[:, 2]], axis=-1)
    proj[same, :2] = uv[same]
    proj[same, 2] = y[same]
    r = proj - target
    r[:, 2] *= beta
    r[~ok] = 0.0
    if not jacobians:
        return Linearization(r, None, None, None, ok)

    # d r / d q has rows a0 = fx/z (1, 0, -x/z), a1 = fy/z (0, 1, -y/z), a2 = (0, 0, beta)
    iz = 1.0 / z
    x, yq = q[:, 0] * iz, q[:, 1] * iz
    fxz, fyz = (k.fx * iz)[:, None], (k.fy * iz)[:, None]
    R0, R1, R2 = Rrel[:, 0], Rrel[:, 1], Rrel[:, 2]
    M = np.stack([fxz * (R0 - x[:, None] * R2), fyz * (R1 - yq[:, None] * R2), beta * R2], axis=1)
    p = ray * y[:, None]
    J_i = np.empty((E, 3, 6))
    J_i[:, :, :3] = M
    J_i[:, :, 3:] = _cross(p[:, None, :], M)
    J_j = np.zeros((E, 3, 6))
    J_j[:, 0, 0] = -fxz[:, 0]
    J_j[:, 0, 2] = fxz[:, 0] * x
    J_j[:, 1, 1] = -fyz[:, 0]
    J_j[:, 1, 2] = fyz[:, 0] * yq
    J_j[:, 2, 2] = -beta
    # a_k x q, written out
    J_j[:, 0, 3:] = fxz * np.stack([x * q[:, 1], -(x * q[:, 0] + q[:, 2]), q[:, 1]], axis=-1)
    J_j[:, 1, 3:] = fyz * np.stack([q[:, 2] + yq * q[:, 1], -yq * q[:, 0], -q[:, 0]], axis=-1)
    J_j[:, 2, 3] = -beta * q[:, 1]
    J_j[:, 2, 4] = beta * q[:, 0]
    J_y = np.einsum("eab,eb->ea", M, ray, optimize=False)
    J_i[same] = 0.0
    J_j[same] = 0.0
    J_y[same] = np.array([0.0, 0.0, beta])
    for J in (J_i, J_j, J_y):
        J[~ok] = 0.0
    return Linearization(r, J_i, J_j, J_y, ok)


def _cross(a, b):
    return np.stack([a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
                     a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
                     a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]], axis=-1)


def residual_jacobians(x, y, target, Ti: Pose, Tj: Pose, k: CameraIntrinsics, beta=1.0):
    """Single-edge residual with Jacobians wrt (Ti twist, Tj twist, depth)."""
    same = Ti is Tj
    rel = relative_pose(Ti, Tj)
    lin = linearize(np.asarray(x, float)[None, :2], np.array([float(y)]), np.asarray(target, float)[None],
                    rel.R[None], rel.t[None], np.array([same]), k, beta)
    return lin.r[0], lin.J_i[0], lin.J_j[0], lin.J_y[0]


def schur_solve(A, B, C, g_p, g_y, damping=0.0):
    """Solve ``[[A + damping*I, B], [B^T, diag(C)]] [dp; dy] = -[g_p; g_y]`` by eliminating ``dy``."""
    Cinv = 1.0 / C
    BC = B * Cinv[None, :]
    S = A - BC @ B.T + damping * np.eye(A.shape[0])
    rhs = -(g_p - BC @ g_y)
    dp = np.linalg.solve(S, rhs) if S.size else np.zeros(0)
    dy = -(g_y + B.T @ dp) * Cinv
    return dp, dy


class _Edges:
    """Residual graph of one optimization window."""

    def __init__(self, tracks: TrackTensor, targets, soft, pose_w, start, stop, anchor, radius, frozen_before):
        L = tracks.sequence_length
        half = tracks.half_window
        i_lo = max(0, start - radius)
        groups = []
        for i in range(i_lo, stop + 1):
            for s in range(tracks.window_size):
                j = i - half + s
                if j < 0 or j > stop or abs(i - j) > radius:
                    continue
                if not (start <= i <= stop or start <= j <= stop):
                    continue
                n = np.flatnonzero(soft[i, :, s] > 0)
                if n.size:
                    groups.append((i, j, s, n))
        self.groups = groups
        if groups:
            self.ii = np.concatenate([np.full(g[3].size, g[0]) for g in groups])
            self.jj = np.concatenate([np.full(g[3].size, g[1]) for g in groups])
            self.ss = np.concatenate([np.full(g[3].size, g[2]) for g in groups])
            self.nn = np.concatenate([g[3] for g in groups])
        else:
            self.ii = self.jj = self.ss = self.nn = np.zeros(0, dtype=np.int64)
        sizes = [g[3].size for g in groups]
        self.gi = np.array([g[0] for g in groups], dtype=np.int64)
        self.gj = np.array([g[1] for g in groups], dtype=np.int64)
        self.gid = np.repeat(np.arange(len(groups)), sizes).astype(np.int64)
        self.bounds = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)

        self.uv = tracks.query[self.ii, self.nn, :2]
        self.prior = tracks.query[..., 2]
        self.target = targets[self.ii, self.nn, self.ss]
        self.soft = soft[self.ii, self.nn, self.ss]
        self.pose_w = pose_w[self.ii, self.nn, self.ss]
        self.same = self.ii == self.jj

        pose_var = np.full(L, -1, dtype=np.int64)
        var_frames = [f for f in range(max(start, frozen_before), stop + 1) if f != anchor]
        pose_var[var_frames] = np.arange(len(var_frames))
        self.var_frames = var_frames
        self.pi = pose_var[self.ii]
        self.pj = pose_var[self.jj]

        N = tracks.queries_per_frame
        depth_frames = np.arange(max(start, frozen_before), stop + 1)
        depth_var = np.full((L, N), -1, dtype=np.int64)
        if depth_frames.size:
            depth_var[depth_frames] = np.arange(depth_frames.size * N).reshape(-1, N)
        self.depth_var_map = depth_var
        self.depth_frames = depth_frames
        self.mi = depth_var[self.ii, self.nn]
        self.P = len(var_frames)
        self.M = depth_frames.size * N

    def __len__(self):
        return self.ii.size


class BundleAdjuster:
    """Assembles and solves one window. Use :func:`solve_window` / :func:`run_sliding`."""

    def __init__(self, tracks: TrackTensor, k: CameraIntrinsics, cfg: BAConfig, workers: int = 1):
        self.tracks = tracks
        self.k = k
        self.cfg = cfg
        self.workers = max(1, int(workers))
        source, use_mask, use_label = MODES[cfg.mode]
        self.targets = tracks.static() if source == "decoupled" else np.asarray(tracks.total)
        v = tracks.visibility
        m = tracks.dynamic_label[..., None]
        self.soft = v * (1.0 - m) if use_label else v.copy()
        self.soft = np.where(tracks.in_range()[:, None, :], self.soft, 0.0)
        if use_mask:
            self.pose_w = np.where(pose_mask(v, m, cfg.delta_v, cfg.delta_m), self.soft, 0.0)
        else:
            self.pose_w = self.soft
        self.masked = use_mask
        self.radius = cfg.track_radius if cfg.track_radius is not None else tracks.half_window

    # -- evaluation -------------------------------------------------------
    def linearize_edges(self, edges: _Edges, R, t, depths, jacobians=True):
        y = depths[edges.ii, edges.nn]
        gi, gj = edges.gi, edges.gj
        Rg = np.einsum("gba,gbc->gac", R[gj], R[gi], optimize=False)         # Rj^T Ri
        tg = np.einsum("gba,gb->ga", R[gj], t[gi] - t[gj], optimize=False)
        return linearize(edges.uv, y, edges.target, Rg[edges.gid], tg[edges.gid], edges.same, self.k,
                         self.cfg.depth_residual_weight, jacobians)

    def _robust(self, r):
        d = self.cfg.huber_delta
        if self.cfg.huber_joint:
            nrm = np.linalg.norm(r, axis=-1)
            return huber_cost(nrm, d), np.repeat(huber_weight(nrm, d)[:, None], 3, axis=1)
        a = np.abs(r)
        return huber_cost(a, d).sum(axis=-1), huber_weight(a, d)

    def cost(self, edges: _Edges, R, t, depths, weights=None):
        lin = self.linearize_edges(edges, R, t, depths, jacobians=False)
        rho, _ = self._robust(lin.r)
        w = edges.soft if weights is None else weights
        c = float(np.sum(w * rho))
        if edges.M:
            y = depths[edges.depth_frames]
            c += self.cfg.alpha * float(np.sum((y - edges.prior[edges.depth_frames]) ** 2))
        return c

    # -- normal equations -------------------------------------------------
    def _pose_blocks(self, edges: _Edges, lin, W):
        """Reduce J^T W J and J^T W r pose blocks group by group (fixed order, optionally threaded)."""
        P = edges.P

        def work(g):
            lo, hi = edges.bounds[g], edges.bounds[g + 1]
            pi, pj = edges.pi[lo], edges.pj[lo]
            Wg = W[lo:hi]
            r = lin.r[lo:hi]
            out = []
            Ji, Jj = lin.J_i[lo:hi], lin.J_j[lo:hi]
            Ji, Jj = Ji.reshape(-1, 6), Jj.reshape(-1, 6)
            Wr = (Wg * r).ravel()
            Wg = Wg.ravel()[:, None]
            if pi >= 0:
                WJi = Ji * Wg
                out.append(("H", pi, pi, WJi.T @ Ji))
                out.append(("g", pi, None, Ji.T @ Wr))
                if pj >= 0 and pj != pi:
                    out.append(("H", pi, pj, WJi.T @ Jj))
            if pj >= 0 and pj != pi:
                out.append(("H", pj, pj, (Jj * Wg).T @ Jj))
                out.append(("g", pj, None, Jj.T @ Wr))
            return out

        n_groups = len(edges.groups)
        if self.workers > 1 and n_groups > 1:
            with ThreadPoolExecutor(self.workers) as ex:
                parts = list(ex.map(work, range(n_groups)))
        else:
            parts = [work(g) for g in range(n_groups)]
        A = np.zeros((6 * P, 6 * P))
        g_p = np.zeros(6 * P)
        for part in parts:
            for kind, a, b, val in part:
                if kind == "g":
                    g_p[6 * a:6 * a + 6] += val
                else:
                    A[6 * a:6 * a + 6, 6 * b:6 * b + 6] += val
                    if a != b:
                        A[6 * b:6 * b + 6, 6 * a:6 * a + 6] += val.T
        return A, g_p

    def _depth_blocks(self, edges: _Edges, lin, W, depths):
        M, P = edges.M, edges.P
        mi = edges.mi
        has = mi >= 0
        WJy = lin.J_y * W
        C = np.bincount(mi[has], weights=np.sum(WJy * lin.J_y, axis=-1)[has], minlength=M) + self.cfg.alpha
        g_y = np.bincount(mi[has], weights=np.sum(WJy * lin.r, axis=-1)[has], minlength=M)
        if M:
            y = depths[edges.depth_frames].ravel()
            g_y += self.cfg.alpha * (y - edges.prior[edges.depth_frames].ravel())
        B = np.zeros(6 * P * M)
        for pidx, J in ((edges.pi, lin.J_i), (edges.pj, lin.J_j)):
            sel = has & (pidx >= 0)
            vals = np.einsum("eka,ek->ea", J[sel], WJy[sel])            # (E, 6)
            rows = 6 * pidx[sel][:, None] + np.arange(6)[None, :]
            flat = rows * M + mi[sel][:, None]
            B += np.bincount(flat.ravel(), weights=vals.ravel(), minlength=6 * P * M)
        return B.reshape(6 * P, M), C, g_y

    def _depth_step(self, edges: _Edges, lin, W, depths, dp):
        """Depth increments given pose increments, using weights ``W`` (back-substitution)."""
        M = edges.M
        mi = edges.mi
        has = mi >= 0
        WJy = lin.J_y * W
        C = np.bincount(mi[has], weights=np.sum(WJy * lin.J_y, axis=-1)[has], minlength=M) + self.cfg.alpha
        Jdp = np.zeros_like(lin.r)
        for pidx, J in ((edges.pi, lin.J_i), (edges.pj, lin.J_j)):
            sel = pidx >= 0
            Jdp[sel] += np.einsum("eka,ea->ek", J[sel], dp.reshape(-1, 6)[pidx[sel]])
        rhs = np.bincount(mi[has], weights=np.sum(WJy * (lin.r + Jdp), axis=-1)[has], minlength=M)
        y = depths[edges.depth_frames].ravel()
        rhs += self.cfg.alpha * (y - edges.prior[edges.depth_frames].ravel())
        return -rhs / np.where(C > 0, C, 1.0) * (C > 0)

    def normal_equations(self, edges: _Edges, R, t, depths, weights=None):
        """Dense blocks ``A, B, C, g_p, g_y`` of the weighted normal equations (for inspection/tests)."""
        lin = self.linearize_edges(edges, R, t, depths)
        _, wr = self._robust(lin.r)
        W = (edges.pose_w if weights is None else weights)[:, None] * wr
        A, g_p = self._pose_blocks(edges, lin, W)
        B, C, g_y = self._depth_blocks(edges, lin, W, depths)
        return A, B, C, g_p, g_y

    def _check_constraints(self, edges: _Edges):
        for f in edges.var_frames:
            touch = ((edges.ii == f) | (edges.jj == f)) & ~edges.same & (edges.pose_w > 0)
            count = int(touch.sum())
            if count < self.cfg.min_pose_terms:
                raise UnderConstrainedFrameError(
                    f"frame {f} has {count} usable pose residuals (< {self.cfg.min_pose_terms})",
                    frame=f, count=count)

    # -- solve ------------------------------------------------------------
    def edges(self, start: int, stop: int, anchor: int = 0, frozen_before: int | None = None) -> _Edges:
        """Residual graph of the window ``start..stop``; frames before ``frozen_before`` are constant."""
        frozen_before = start if frozen_before is None else frozen_before
        return _Edges(self.tracks, self.targets, self.soft, self.pose_w, start, stop, anchor,
                      self.radius, frozen_before)

    def solve(self, est: SceneEstimate, start: int, stop: int, anchor: int = 0,
              frozen_before: int | None = None) -> tuple[SceneEstimate, WindowReport]:
        cfg = self.cfg
        edges = self.edges(start, stop, anchor, frozen_before)
        self._check_constraints(edges)
        R, t = poses_to_arrays(est.poses)
        poses = list(est.poses)
        depths = est.depths.copy()
        report = WindowReport(start, stop, num_residuals=len(edges))
        cost = self.cost(edges, R, t, depths)
        report.costs.append(cost)
        lam = cfg.damping
        # the depth update needs its own soft-weight solve only if the mask removed something
        split_depth = self.masked and not np.array_equal(edges.pose_w, edges.soft)

        for _ in range(cfg.gn_iterations):
            if cost <= cfg.cost_floor:
                break
            lin = self.linearize_edges(edges, R, t, depths)
            report.dropped_behind = int((~lin.ok).sum())
            _, wr = self._robust(lin.r)
            Wp = edges.pose_w[:, None] * wr
            Ws = edges.soft[:, None] * wr if split_depth else None
            A, g_p = self._pose_blocks(edges, lin, Wp)
            B, C, g_y = self._depth_blocks(edges, lin, Wp, depths)
            C_safe = np.where(C > 0, C, 1.0)
            accepted = False
            while True:
                try:
                    dp, dy = schur_solve(A, B, C_safe, g_p, g_y * (C > 0), lam)
                    finite = np.all(np.isfinite(dp))
                except np.linalg.LinAlgError:
                    finite = False
                if not finite:
                    lam = max(lam * 10.0, 1e-6)
                    if lam > cfg.max_damping:
                        raise SolverFailureError(
                            f"reduced pose system singular in window [{start}, {stop}]",
                            {"window": (start, stop), "damping": lam, "poses": edges.P, "depths": edges.M})
                    continue
                if split_depth:
                    dy = self._depth_step(edges, lin, Ws, depths, dp)
                new_poses, new_depths = self._apply(poses, depths, edges, dp, dy)
                R2, t2 = poses_to_arrays(new_poses)
                new_cost = self.cost(edges, R2, t2, new_depths)
                if new_cost <= cost:
                    converged = cost - new_cost <= cfg.cost_rtol * cost
                    poses, depths, R, t, cost = new_poses, new_depths, R2, t2, new_cost
                    report.accepted += 1
                    lam = max(lam / 10.0, cfg.damping)
                    accepted = True
                    break
                report.rejected += 1
                lam = max(lam * 10.0, 1e-6)
                if lam > cfg.max_damping:
                    break
            report.costs.append(cost)
            if not accepted or converged:
                break
        report.damping = lam
        return SceneEstimate(poses, depths, est.reports + [report]), report

    def _apply(self, poses, depths, edges: _Edges, dp, dy):
        new_poses = list(poses)
        for idx, f in enumerate(edges.var_frames):
            new_poses[f] = se3_retract(poses[f], dp[6 * idx:6 * idx + 6])
        new_depths = depths.copy()
        if edges.M:
            block = depths[edges.depth_frames].ravel() + dy
            new_depths[edges.depth_frames] = np.maximum(block, self.cfg.depth_floor).reshape(-1, depths.shape[1])
        return new_poses, new_depths


def solve_window(tracks: TrackTensor, est: SceneEstimate, k: CameraIntrinsics, cfg: BAConfig,
                 start: int, stop: int, anchor: int = 0, workers: int = 1) -> SceneEstimate:
    """Optimize poses and depths of frames ``start..stop`` (inclusive); earlier frames stay fixed."""
    out, _ = BundleAdjuster(tracks, k, cfg, workers).solve(est, start, stop, anchor)
    return out


def initial_estimate(tracks: TrackTensor, priors=None) -> SceneEstimate:
    L = tracks.sequence_length
    depths = np.array(tracks.query[..., 2] if priors is None else priors, dtype=float)
    return SceneEstimate([Pose.identity() for _ in range(L)], depths)


def run_sliding(tracks: TrackTensor, k: CameraIntrinsics, cfg: BAConfig, priors=None,
                init_poses=None, workers: int = 1) -> SceneEstimate:
    """Process the sequence with a window advancing one frame at a time.

    Frame 0 is the gauge anchor (identity). New frames start from a
    constant-velocity extrapolation, or from ``init_poses`` re-expressed
    relative to its first pose when given. Frames leaving the window are frozen.
    """
    L = tracks.sequence_length
    est = initial_estimate(tracks, priors)
    W = min(cfg.window_frames, L)
    ba = BundleAdjuster(tracks, k, cfg, workers)

    def init_pose(f):
        if init_poses is not None:
            return se3_compose(se3_inverse(init_poses[0]), init_poses[f])
        if f >= 2:
            prev, prev2 = est.poses[f - 1], est.poses[f - 2]
            return se3_compose(prev, se3_compose(se3_inverse(prev2), prev))
        return est.poses[f - 1] if f >= 1 else Pose.identity()

    for f in range(1, W):
        est.poses[f] = init_pose(f)
    windows = [(0, W - 1)] + [(t - W + 1, t) for t in range(W, L)]
    for start, stop in windows:
        if stop >= W:
            est.poses[stop] = init_pose(stop)
        try:
            est, rep = ba.solve(est, start, stop, anchor=0)
        except DynBAError as e:
            e.args = (f"window [{start}, {stop}]: {e.args[0]}",) + e.args[1:]
            raise
        log.debug("window [%d, %d]: cost %.4g -> %.4g (%d accepted, %d rejected)",
                  start, stop, rep.costs[0], rep.costs[-1], rep.accepted, rep.rejected)
    return est
