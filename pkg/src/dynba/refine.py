"""Scale-grid refinement of dense depth against sparse BA geometry.

Each frame gets a coarse grid of multiplicative scales. Grid nodes are
corner aligned: node ``(r, c)`` sits on pixel
``(c * (W-1) / (Wg-1), r * (H-1) / (Hg-1))`` and scales at other pixels are
bilinear blends of the four surrounding nodes. The grids (in log space) and
one local scale per sparse query are optimized with Adam on a depth
consistency loss plus a pairwise-distance rigidity loss, both using a
Charbonnier surrogate of the absolute value.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import DivergedError
from .seeding import substream
from .tracks import bilinear_sample

log = logging.getLogger(__name__)

CHARBONNIER_EPS = 1e-6


def charbonnier(r):
    return np.sqrt(r * r + CHARBONNIER_EPS ** 2) - CHARBONNIER_EPS


def charbonnier_grad(r):
    return r / np.sqrt(r * r + CHARBONNIER_EPS ** 2)


def grid_weights(uv, grid_shape, image_shape):
    """Flat node indices ``(..., 4)`` and bilinear weights ``(..., 4)`` for pixels ``uv``.

    Pixels outside the image are clamped to the border.
    """
    gh, gw = grid_shape
    H, W = image_shape
    uv = np.asarray(uv, dtype=float)
    gx = np.clip(uv[..., 0], 0.0, W - 1.0) * (gw - 1) / (W - 1)
    gy = np.clip(uv[..., 1], 0.0, H - 1.0) * (gh - 1) / (H - 1)
    x0 = np.minimum(np.floor(gx).astype(np.int64), gw - 2)
    y0 = np.minimum(np.floor(gy).astype(np.int64), gh - 2)
    a = gx - x0
    b = gy - y0
    idx = np.stack([y0 * gw + x0, y0 * gw + x0 + 1, (y0 + 1) * gw + x0, (y0 + 1) * gw + x0 + 1], axis=-1)
    w = np.stack([(1 - a) * (1 - b), a * (1 - b), (1 - a) * b, a * b], axis=-1)
    return idx, w


def _interp(flat_values, idx, w):
    # lerp form so that a constant grid reproduces its value exactly
    v = flat_values[idx]
    a = w[..., 1] + w[..., 3]
    b = w[..., 2] + w[..., 3]
    top = v[..., 0] + a * (v[..., 1] - v[..., 0])
    bot = v[..., 2] + a * (v[..., 3] - v[..., 2])
    return top + b * (bot - top)


def upsample_grid(values: np.ndarray, H: int, W: int) -> np.ndarray:
    """Bilinear upsampling of a node grid to a full ``H x W`` image."""
    values = np.asarray(values, dtype=float)
    vv, uu = np.mgrid[0:H, 0:W].astype(float)
    idx, w = grid_weights(np.stack([uu, vv], axis=-1), values.shape, (H, W))
    return _interp(values.ravel(), idx, w)


@dataclass
class ScaleGrid:
    values: np.ndarray
    frame: int
    image_size: tuple[int, int]    # (H, W)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or min(self.values.shape) < 2:
            raise ValueError("scale grid must be at least 2x2")
        if np.any(~(self.values > 0)):
            raise ValueError("scale grid values must be positive")

    @classmethod
    def ones(cls, shape, frame, image_size) -> "ScaleGrid":
        return cls(np.ones(shape), frame, tuple(image_size))

    def node_pixel(self, r: int, c: int) -> tuple[float, float]:
        gh, gw = self.values.shape
        H, W = self.image_size
        return c * (W - 1) / (gw - 1), r * (H - 1) / (gh - 1)

    def sample(self, x) -> np.ndarray:
        idx, w = grid_weights(x, self.values.shape, self.image_size)
        return _interp(self.values.ravel(), idx, w)

    def upsample(self) -> np.ndarray:
        return upsample_grid(self.values, *self.image_size)


def sample_scale(grid: ScaleGrid, x) -> np.ndarray:
    return grid.sample(x)


def refined_depth(depth: np.ndarray, grid: ScaleGrid, x) -> np.ndarray:
    return grid.sample(x) * bilinear_sample(depth, x)


@dataclass
class RefineConfig:
    grid_size: tuple[int, int] = (12, 16)
    lambda_rigid: float = 0.1
    lambda_sigma: float = 1e-3
    pairs_per_frame_pair: int = 256
    steps: int = 500
    step_size: float = 1e-2
    # local scales move slower than grids so that the grids absorb the shared error
    sigma_step_scale: float = 0.1
    lr_schedule: str = "cosine"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    use_depth_loss: bool = True
    use_rigid_loss: bool = True
    # "ba": anchor on BA-refined query depths; "prior": on the tracker query depths
    anchor: str = "ba"
    visibility_threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.grid_size = tuple(int(g) for g in self.grid_size)
        if min(self.grid_size) < 2:
            raise ValueError("grid must be at least 2x2")
        if min(self.lambda_rigid, self.lambda_sigma, self.step_size) < 0:
            raise ValueError("weights and step size must be non-negative")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.anchor not in ("ba", "prior"):
            raise ValueError(f"unknown anchor {self.anchor!r}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.lr_schedule!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid_size"] = list(self.grid_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RefineConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown refine fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class RigidPairs:
    """Sampled static point pairs, one row per (frame pair, point pair)."""

    i: np.ndarray
    j: np.ndarray
    a: np.ndarray
    b: np.ndarray
    skipped: int = 0


def sample_rigid_pairs(tracks, pairs_per_frame_pair: int, seed: int = 0,
                       visibility_threshold: float = 0.5) -> RigidPairs:
    """Uniform static pairs per ordered frame pair ``0 < |i - j| <= S'``; reseeded per pair."""
    L, N, S = tracks.sequence_length, tracks.queries_per_frame, tracks.window_size
    half = S // 2
    static = tracks.dynamic_label < 1.0
    I, J, A, B = [], [], [], []
    skipped = 0
    for i in range(L):
        for s in range(S):
            j = i - half + s
            if j == i or j < 0 or j >= L:
                continue
            cand = np.flatnonzero(static[i] & (tracks.visibility[i, :, s] >= visibility_threshold))
            n = cand.size
            if n < 2:
                skipped += 1
                continue
            rng = substream(seed, "rigid-pairs", i, j)
            a = rng.integers(0, n, size=pairs_per_frame_pair)
            b = (a + rng.integers(1, n, size=pairs_per_frame_pair)) % n
            I.append(np.full(pairs_per_frame_pair, i))
            J.append(np.full(pairs_per_frame_pair, j))
            A.append(cand[a])
            B.append(cand[b])
    if not I:
        empty = np.zeros(0, dtype=np.int64)
        return RigidPairs(empty, empty, empty, empty, skipped)
    return RigidPairs(np.concatenate(I), np.concatenate(J), np.concatenate(A), np.concatenate(B), skipped)


class RefineProblem:
    """Precomputed sampling structure; evaluates losses and gradients in log parameters.

    Parameters are ``u`` (``L x Hg x Wg`` log grid scales) and ``s``
    (``L x N`` log local scales).
    """

    def __init__(self, depth_maps, tracks, anchors, intrinsics, grid_size=(12, 16),
                 pairs: RigidPairs | None = None, lambda_sigma=1e-3):
        self.depth_maps = np.asarray(depth_maps, dtype=float)
        L, H, W = self.depth_maps.shape
        self.shape = (L, H, W)
        self.grid_size = tuple(grid_size)
        gh, gw = self.grid_size
        self.G = gh * gw
        self.lambda_sigma = lambda_sigma
        self.tracks = tracks
        N = tracks.queries_per_frame
        K = intrinsics
        self.K = K

        anchors = np.asarray(anchors, dtype=float)
        self.sigma_active = np.isfinite(anchors) & (anchors > 0)
        self.anchors = np.where(self.sigma_active, anchors, 0.0)

        qf = np.repeat(np.arange(L), N)
        quv = tracks.query[..., :2].reshape(-1, 2)
        self.q_frame = qf
        self.q_idx, self.q_w = self._sampling(qf, quv)
        self.q_D = np.array([bilinear_sample(self.depth_maps[t], tracks.query[t, :, :2]) for t in range(L)]).ravel()

        self.pairs = pairs
        if pairs is not None and pairs.i.size:
            S = tracks.window_size
            half = S // 2
            s_idx = pairs.j - pairs.i + half
            # four points per pair: a and b in frame i (query pixel), a and b in frame j (track pixel)
            uv_ai = tracks.query[pairs.i, pairs.a, :2]
            uv_bi = tracks.query[pairs.i, pairs.b, :2]
            uv_aj = tracks.total[pairs.i, pairs.a, s_idx, :2]
            uv_bj = tracks.total[pairs.i, pairs.b, s_idx, :2]
            self.r_frames = [pairs.i, pairs.i, pairs.j, pairs.j]
            self.r_uv = [uv_ai, uv_bi, uv_aj, uv_bj]
            self.r_samp = [self._sampling(f, uv) for f, uv in zip(self.r_frames, self.r_uv)]
            self.r_D = [self._depth_at(f, uv) for f, uv in zip(self.r_frames, self.r_uv)]
            self.r_ray = [np.stack([(uv[:, 0] - K.cx) / K.fx, (uv[:, 1] - K.cy) / K.fy,
                                    np.ones(len(uv))], axis=-1) for uv in self.r_uv]
            m = tracks.dynamic_label
            self.r_weight = (1.0 - m[pairs.i, pairs.a]) * (1.0 - m[pairs.i, pairs.b])
        else:
            self.r_weight = np.zeros(0)

    def _sampling(self, frames, uv):
        idx, w = grid_weights(uv, self.grid_size, self.shape[1:])
        return idx + (frames * self.G)[:, None], w

    def _depth_at(self, frames, uv):
        out = np.empty(len(frames))
        for t in np.unique(frames):
            sel = frames == t
            out[sel] = bilinear_sample(self.depth_maps[t], uv[sel])
        return out

    @property
    def n_params(self):
        L = self.shape[0]
        return L * self.G, self.anchors.size

    def depth_terms(self, u, s, grad=True):
        theta = np.exp(u)
        sigma = np.exp(s)
        idx, w = self.q_idx, self.q_w
        th = _interp(theta, idx, w)
        act = self.sigma_active.ravel()
        r = th * self.q_D - sigma * self.anchors.ravel()
        rho = np.where(act, charbonnier(r), 0.0)
        reg = self.lambda_sigma * np.sum(np.where(act, (sigma - 1.0) ** 2, 0.0))
        value = float(np.sum(rho) + reg)
        if not grad:
            return value, None, None
        g = np.where(act, charbonnier_grad(r), 0.0)
        contrib = (g * self.q_D)[:, None] * w * theta[idx]
        gu = np.bincount(idx.ravel(), weights=contrib.ravel(), minlength=u.size)
        gs = np.where(act, -g * sigma * self.anchors.ravel() + 2 * self.lambda_sigma * (sigma - 1.0) * sigma, 0.0)
        return value, gu, gs

    def rigid_terms(self, u, grad=True):
        if self.r_weight.size == 0:
            return 0.0, np.zeros_like(u) if grad else None
        theta = np.exp(u)
        P, Dhat = [], []
        for (idx, w), D, ray in zip(self.r_samp, self.r_D, self.r_ray):
            dh = _interp(theta, idx, w) * D
            Dhat.append(dh)
            P.append(ray * dh[:, None])
        di_vec = P[0] - P[1]
        dj_vec = P[2] - P[3]
        di = np.linalg.norm(di_vec, axis=-1)
        dj = np.linalg.norm(dj_vec, axis=-1)
        e = dj - di
        value = float(np.sum(self.r_weight * charbonnier(e)))
        if not grad:
            return value, None
        ge = self.r_weight * charbonnier_grad(e)
        safe_i = np.where(di > 0, di, 1.0)
        safe_j = np.where(dj > 0, dj, 1.0)
        # d|Pa - Pb| / dDhat_a = (Pa - Pb) . ray_a / |Pa - Pb|
        dd = [
            -np.sum(di_vec * self.r_ray[0], axis=-1) / safe_i,
            np.sum(di_vec * self.r_ray[1], axis=-1) / safe_i,
            np.sum(dj_vec * self.r_ray[2], axis=-1) / safe_j,
            -np.sum(dj_vec * self.r_ray[3], axis=-1) / safe_j,
        ]
        gu = np.zeros_like(u)
        for (idx, w), D, d in zip(self.r_samp, self.r_D, dd):
            contrib = (ge * d * D)[:, None] * w * theta[idx]
            gu += np.bincount(idx.ravel(), weights=contrib.ravel(), minlength=u.size)
        return value, gu


def loss_depth(grids, sigma, tracks, ba_depths, depth_maps, lambda_sigma=1e-3, intrinsics=None):
    """Depth consistency loss for explicit grids and local scales."""
    values = np.stack([g.values for g in grids])
    prob = RefineProblem(depth_maps, tracks, ba_depths, intrinsics or tracks.intrinsics,
                         values.shape[1:], None, lambda_sigma)
    s = np.log(np.where(prob.sigma_active, np.asarray(sigma, dtype=float), 1.0)).ravel()
    return prob.depth_terms(np.log(values).ravel(), s, grad=False)[0]


def loss_rigid(grids, tracks, intrinsics, depth_maps, pairs: RigidPairs | None = None,
               pairs_per_frame_pair=256, seed=0):
    """Rigidity loss; samples pairs deterministically when none are given."""
    values = np.stack([g.values for g in grids])
    if pairs is None:
        pairs = sample_rigid_pairs(tracks, pairs_per_frame_pair, seed)
    anchors = np.ones((tracks.sequence_length, tracks.queries_per_frame))
    prob = RefineProblem(depth_maps, tracks, anchors, intrinsics, values.shape[1:], pairs)
    return prob.rigid_terms(np.log(values).ravel(), grad=False)[0]


@dataclass
class RefineResult:
    grids: list
    sigma: np.ndarray
    depth_maps: np.ndarray
    loss_curve: list = field(default_factory=list)
    skipped_frame_pairs: int = 0
    best_step: int = 0


class Adam:
    def __init__(self, size, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.k = 0

    def step(self, params, grad, lr):
        self.k += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.k)
        vhat = self.v / (1 - self.beta2 ** self.k)
        return params - lr * mhat / (np.sqrt(vhat) + self.eps)


def refine(depths, tracks, ba_depths, cfg: RefineConfig | None = None, intrinsics=None) -> RefineResult:
    """Optimize per-frame scale grids and local scales; return refined dense depth.

    ``ba_depths`` is the ``(L, N)`` array of refined query depths; non-positive
    or NaN entries mark queries without a BA depth (their local scale stays 1).
    """
    cfg = cfg or RefineConfig()
    K = intrinsics or tracks.intrinsics
    depths = np.asarray(depths, dtype=float)
    if np.any(~(depths > 0)):
        raise ValueError("depth maps must be positive")
    L, H, W = depths.shape
    anchors = np.asarray(ba_depths, dtype=float) if cfg.anchor == "ba" else tracks.query[..., 2].copy()

    use_rigid = cfg.use_rigid_loss and cfg.lambda_rigid > 0
    pairs = sample_rigid_pairs(tracks, cfg.pairs_per_frame_pair, cfg.seed, cfg.visibility_threshold) \
        if use_rigid else None
    prob = RefineProblem(depths, tracks, anchors, K, cfg.grid_size, pairs, cfg.lambda_sigma)
    nu, ns = prob.n_params
    params = np.zeros(nu + ns)
    opt = Adam(nu + ns, cfg.beta1, cfg.beta2, cfg.adam_eps)
    lr_vec = np.concatenate([np.ones(nu), np.full(ns, cfg.sigma_step_scale) * prob.sigma_active.ravel()])

    def evaluate(p):
        u, s = p[:nu], p[nu:]
        total = 0.0
        grad = np.zeros_like(p)
        terms = {}
        if cfg.use_depth_loss:
            vd, gu, gs = prob.depth_terms(u, s)
            terms["depth"] = vd
            total += vd
            grad[:nu] += gu
            grad[nu:] += gs
        if use_rigid:
            vr, gr = prob.rigid_terms(u)
            terms["rigid"] = vr
            total += cfg.lambda_rigid * vr
            grad[:nu] += cfg.lambda_rigid * gr
        for name, val in terms.items():
            if not np.isfinite(val):
                raise DivergedError(f"non-finite {name} loss", term=name)
        return total, grad

    curve = []
    best = (np.inf, params.copy(), 0)
    for k in range(cfg.steps):
        value, grad = evaluate(params)
        curve.append(value)
        if value < best[0]:
            best = (value, params.copy(), k)
        if cfg.lr_schedule == "cosine":
            lr = cfg.step_size * 0.5 * (1.0 + np.cos(np.pi * k / cfg.steps))
        else:
            lr = cfg.step_size
        params = opt.step(params, grad * (lr_vec > 0), lr * lr_vec)
    value, _ = evaluate(params)
    curve.append(value)
    if value < best[0]:
        best = (value, params.copy(), cfg.steps)
    params = best[1]

    gh, gw = cfg.grid_size
    theta = np.exp(params[:nu]).reshape(L, gh, gw)
    sigma = np.where(prob.sigma_active, np.exp(params[nu:]).reshape(anchors.shape), 1.0)
    grids = [ScaleGrid(theta[t], t, (H, W)) for t in range(L)]
    refined = np.stack([g.upsample() * depths[t] for t, g in enumerate(grids)])
    log.info("refinement: loss %.6g -> %.6g (best at step %d)", curve[0], best[0], best[2])
    return RefineResult(grids, sigma, refined, curve, pairs.skipped if pairs else 0, best[2])
