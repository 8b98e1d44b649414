"""Synthetic dynamic scenes with exact ground truth.

The static world is a single analytic surface, a tilted plane with a
low-frequency sinusoidal relief, seen by a camera moving on a smooth path.
Each dynamic body is a flat rectangle orbiting a pivot with a constant
per-frame screw motion. Depth maps are ray cast against these surfaces, and
queries are taken at integer pixel centers so that sampling a depth map at a
query returns the exact surface depth.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import InfeasibleSceneError
from .geometry import CameraIntrinsics, Pose, se3_compose, se3_exp, so3_exp
from .refine import upsample_grid
from .seeding import substream
from .tracks import TrackTensor

log = logging.getLogger(__name__)


@dataclass
class DepthCorruption:
    """Low-frequency multiplicative depth error.

    Node values are ``1 + a * r`` with ``r`` either a random sign
    (``"extremes"``) or uniform on ``[-1, 1]``. The default grid nests inside
    the default refinement grid, so the error lives at a frequency the
    refinement can represent.
    """

    amplitude: float = 0.0
    grid: tuple[int, int] = (2, 6)
    distribution: str = "extremes"

    def __post_init__(self):
        if not 0.0 <= self.amplitude < 1.0:
            raise ValueError("corruption amplitude must lie in [0, 1)")
        if self.distribution not in ("extremes", "uniform"):
            raise ValueError(f"unknown corruption distribution {self.distribution!r}")
        self.grid = tuple(int(g) for g in self.grid)
        if min(self.grid) < 2:
            raise ValueError("corruption grid needs at least 2x2 nodes")


@dataclass
class TrackNoise:
    pixel_sigma: float = 0.0
    depth_sigma: float = 0.0
    label_flip: float = 0.0

    def __post_init__(self):
        if self.pixel_sigma < 0 or self.depth_sigma < 0:
            raise ValueError("noise sigmas must be non-negative")
        if not 0.0 <= self.label_flip <= 1.0:
            raise ValueError("label flip probability must lie in [0, 1]")


@dataclass
class SceneConfig:
    num_frames: int = 60
    width: int = 136
    height: int = 100
    fx: float = 110.0
    fy: float = 110.0
    cx: float = 67.5
    cy: float = 49.5
    num_static_points: int = 400
    num_dynamic_bodies: int = 2
    points_per_body: int = 50
    track_window: int = 9
    query_mode: str = "random"
    # camera path: "wander", "static", "forward" or "lateral"
    camera_motion: str = "wander"
    max_rotation_deg: float = 1.0
    max_translation: float = 0.04
    # background surface z = wall_depth + slope . (x, y) + relief
    wall_depth: float = 6.0
    wall_slope: tuple[float, float] = (0.25, -0.15)
    relief_amplitude: float = 0.3
    relief_wavelength: float = 6.0
    # bodies
    body_depth: float = 3.5
    body_size: float = 1.0
    body_rotation_deg: float = 1.5
    body_speed: float = 0.015
    body_pitch: float = 0.003
    depth_corruption: DepthCorruption = field(default_factory=DepthCorruption)
    track_noise: TrackNoise = field(default_factory=TrackNoise)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.depth_corruption, dict):
            self.depth_corruption = DepthCorruption(**self.depth_corruption)
        if isinstance(self.track_noise, dict):
            self.track_noise = TrackNoise(**self.track_noise)
        self.wall_slope = tuple(float(s) for s in self.wall_slope)
        if self.num_frames < 2:
            raise ValueError("a scene needs at least 2 frames")
        if min(self.num_static_points, self.num_dynamic_bodies, self.points_per_body) < 0:
            raise ValueError("point and body counts must be non-negative")
        if self.track_window < 1 or self.track_window % 2 == 0:
            raise ValueError("track_window must be a positive odd number")
        if self.camera_motion not in ("wander", "static", "forward", "lateral"):
            raise ValueError(f"unknown camera motion {self.camera_motion!r}")
        if self.query_mode not in ("random", "grid"):
            raise ValueError(f"unknown query mode {self.query_mode!r}")
        if self.relief_amplitude < 0 or self.max_rotation_deg < 0 or self.max_translation < 0:
            raise ValueError("amplitudes must be non-negative")

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy, self.width, self.height)

    @property
    def queries_per_frame(self) -> int:
        return self.num_static_points + self.num_dynamic_bodies * self.points_per_body

    def to_dict(self) -> dict:
        d = asdict(self)
        d["wall_slope"] = list(self.wall_slope)
        d["depth_corruption"]["grid"] = list(self.depth_corruption.grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scene fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class BodyMotion:
    """Rectangle of half-size ``half`` whose pose advances by a constant screw each frame."""

    center: np.ndarray
    axis: np.ndarray
    pivot: np.ndarray
    rate: float          # radians per frame
    pitch: float         # meters per frame along the axis
    half: float

    def transform(self, k) -> tuple[np.ndarray, np.ndarray]:
        """Rotation and translation of the body motion from frame 0 to frame ``k``."""
        R = so3_exp(self.axis * self.rate * k)
        t = self.pivot - R @ self.pivot + k * self.pitch * self.axis
        return R, t

    def relative(self, src: int, dst: int) -> tuple[np.ndarray, np.ndarray]:
        Rs, ts = self.transform(src)
        Rd, td = self.transform(dst)
        R = Rd @ Rs.T
        return R, td - R @ ts


@dataclass
class GroundTruth:
    config: SceneConfig
    intrinsics: CameraIntrinsics
    poses: list
    depth_maps: np.ndarray          # (L, H, W)
    surface_ids: np.ndarray         # (L, H, W) -1 background, b >= 0 body b
    tracks: TrackTensor
    static_tracks: np.ndarray       # (L, N, S, 3)
    world_points: np.ndarray        # (L, N, S, 3) actual world position at each step
    owner: np.ndarray               # (L, N) -1 static, else body index
    bodies: list


@dataclass
class CorruptedDepth:
    depth_maps: np.ndarray     # (L, H, W)
    grids: np.ndarray          # (L, gh, gw) coarse multiplicative nodes
    fields: np.ndarray         # (L, H, W) upsampled factors


def _camera_path(cfg: SceneConfig, rng: np.random.Generator) -> list:
    L = cfg.num_frames
    max_rot = np.radians(cfg.max_rotation_deg)
    poses = [Pose.identity()]
    freqs = rng.uniform(0.05, 0.15, size=6)
    phases = rng.uniform(0.0, 2 * np.pi, size=6)
    mix_t = np.array([0.7, 0.4, 0.6])
    mix_r = np.array([0.5, 0.8, 0.3])
    for k in range(1, L):
        if cfg.camera_motion == "static":
            xi = np.zeros(6)
        elif cfg.camera_motion == "forward":
            xi = np.array([0.0, 0.0, cfg.max_translation, 0.0, 0.0, 0.0])
        elif cfg.camera_motion == "lateral":
            xi = np.array([cfg.max_translation, 0.0, 0.0, 0.0, 0.0, 0.0])
        else:
            v = cfg.max_translation * mix_t * np.sin(freqs[:3] * k + phases[:3])
            w = max_rot * mix_r * np.sin(freqs[3:] * k + phases[3:])
            v *= min(1.0, cfg.max_translation / max(np.linalg.norm(v), 1e-300))
            w *= min(1.0, max_rot / max(np.linalg.norm(w), 1e-300))
            xi = np.concatenate([v, w])
        poses.append(se3_compose(poses[-1], se3_exp(xi)))
    return poses


def _bodies(cfg: SceneConfig, rng: np.random.Generator, anchor: Pose | None = None) -> list:
    """Rigid bodies placed in front of the ``anchor`` camera (world frame when omitted)."""
    anchor = anchor or Pose.identity()
    bodies = []
    rate = np.radians(cfg.body_rotation_deg)
    for b in range(cfg.num_dynamic_bodies):
        center = np.array([rng.uniform(-0.6, 0.6), rng.uniform(-0.4, 0.4),
                           cfg.body_depth + rng.uniform(-0.3, 0.3)])
        tilt = rng.normal(scale=0.1, size=2)
        axis = np.array([tilt[0], tilt[1], 1.0])
        axis /= np.linalg.norm(axis)
        if rng.uniform() < 0.5:
            axis = -axis
        ang = rng.uniform(0.0, 2 * np.pi)
        radius = cfg.body_speed / rate if rate > 0 else 0.0
        pivot = center + radius * np.array([np.cos(ang), np.sin(ang), 0.0])
        bodies.append(BodyMotion(anchor.apply(center), anchor.R @ axis, anchor.apply(pivot), rate,
                                 cfg.body_pitch, cfg.body_size / 2))
    return bodies


def _surface(cfg: SceneConfig, x, y):
    """Background height ``z(x, y)`` and its partial derivatives."""
    k = 2 * np.pi / cfg.relief_wavelength
    sx, sy = cfg.wall_slope
    A = cfg.relief_amplitude
    z = cfg.wall_depth + sx * x + sy * y + A * np.sin(k * x + 0.3) * np.cos(k * y - 0.7)
    zx = sx + A * k * np.cos(k * x + 0.3) * np.cos(k * y - 0.7)
    zy = sy - A * k * np.sin(k * x + 0.3) * np.sin(k * y - 0.7)
    return z, zx, zy


def _cast_background(cfg, pose: Pose, rays):
    """Z-depth along camera rays ``(..., 3)`` (unit z component) to the background surface."""
    o = pose.t
    dw = rays @ pose.R.T
    sx, sy = cfg.wall_slope
    denom = dw[..., 2] - sx * dw[..., 0] - sy * dw[..., 1]
    s = (cfg.wall_depth + sx * o[0] + sy * o[1] - o[2]) / denom
    for _ in range(50):
        x = o[0] + s * dw[..., 0]
        y = o[1] + s * dw[..., 1]
        z, zx, zy = _surface(cfg, x, y)
        g = o[2] + s * dw[..., 2] - z
        dg = dw[..., 2] - zx * dw[..., 0] - zy * dw[..., 1]
        step = g / dg
        s = s - step
        if np.max(np.abs(step) / np.maximum(np.abs(s), 1.0)) < 1e-15:
            break
    x = o[0] + s * dw[..., 0]
    y = o[1] + s * dw[..., 1]
    z, _, _ = _surface(cfg, x, y)
    resid = np.abs(o[2] + s * dw[..., 2] - z)
    ok = (s > 0) & np.isfinite(s) & (resid < 1e-9)
    return s, ok


def _cast_body(body: BodyMotion, k: int, pose: Pose, rays):
    R, t = body.transform(k)
    c = R @ body.center + t
    e1, e2, n = R[:, 0], R[:, 1], R[:, 2]
    dw = rays @ pose.R.T
    denom = dw @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        s = ((c - pose.t) @ n) / denom
    p = pose.t + s[..., None] * dw - c
    inside = (np.abs(p @ e1) <= body.half) & (np.abs(p @ e2) <= body.half)
    ok = np.isfinite(s) & (s > 0) & inside
    return s, ok


def render(cfg: SceneConfig, poses, bodies) -> tuple[np.ndarray, np.ndarray]:
    """Depth maps and surface ids for every frame."""
    K = cfg.intrinsics
    H, W = cfg.height, cfg.width
    vv, uu = np.mgrid[0:H, 0:W].astype(float)
    rays = np.stack([(uu - K.cx) / K.fx, (vv - K.cy) / K.fy, np.ones_like(uu)], axis=-1)
    depth = np.empty((len(poses), H, W))
    ids = np.empty((len(poses), H, W), dtype=np.int64)
    for k, pose in enumerate(poses):
        s, ok = _cast_background(cfg, pose, rays)
        if not ok.all():
            raise InfeasibleSceneError(f"frame {k}: background not visible in {int((~ok).sum())} pixels")
        d = s.copy()
        sid = np.full((H, W), -1, dtype=np.int64)
        for b, body in enumerate(bodies):
            sb, okb = _cast_body(body, k, pose, rays)
            closer = okb & (sb < d)
            d[closer] = sb[closer]
            sid[closer] = b
        depth[k] = d
        ids[k] = sid
    return depth, ids


def _pick_pixels(mask: np.ndarray, n: int, mode: str, rng) -> np.ndarray:
    """Choose ``n`` distinct pixel indices (flat) where ``mask`` is set."""
    cand = np.flatnonzero(mask.ravel())
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    if cand.size < n:
        raise InfeasibleSceneError(f"only {cand.size} candidate pixels for {n} queries")
    if mode == "grid":
        H, W = mask.shape
        side = int(np.ceil(np.sqrt(n)))
        cols = np.round((np.arange(side) + 0.5) * W / side - 0.5).astype(int)
        rows = np.round((np.arange(side) + 0.5) * H / side - 0.5).astype(int)
        lattice = (rows[:, None] * W + cols[None, :]).ravel()
        chosen = lattice[mask.ravel()[lattice]][:n]
        if chosen.size < n:
            rest = np.setdiff1d(cand, chosen)
            chosen = np.concatenate([chosen, rng.choice(rest, size=n - chosen.size, replace=False)])
        return chosen
    return rng.choice(cand, size=n, replace=False)


def generate(config: SceneConfig) -> GroundTruth:
    cfg = config
    K = cfg.intrinsics
    rng = substream(cfg.seed, "scene")
    poses = _camera_path(cfg, rng)
    # bodies sit in front of the mid-sequence camera so they stay in view longer
    bodies = _bodies(cfg, rng, poses[len(poses) // 2])
    depth, ids = render(cfg, poses, bodies)

    L, N, S = cfg.num_frames, cfg.queries_per_frame, cfg.track_window
    half = S // 2
    H, W = cfg.height, cfg.width
    query = np.zeros((L, N, 3))
    owner = np.full((L, N), -1, dtype=np.int64)
    qrng = substream(cfg.seed, "queries")
    for t in range(L):
        picks, own = [], []
        shortfall = 0
        for b in range(cfg.num_dynamic_bodies):
            mask = ids[t] == b
            n_b = min(cfg.points_per_body, int(mask.sum()))
            shortfall += cfg.points_per_body - n_b
            picks.append(_pick_pixels(mask, n_b, "random", qrng))
            own.append(np.full(n_b, b))
        n_static = cfg.num_static_points + shortfall
        if shortfall:
            log.info("frame %d: %d body queries replaced by background queries", t, shortfall)
        picks.insert(0, _pick_pixels(ids[t] == -1, n_static, cfg.query_mode, qrng))
        own.insert(0, np.full(n_static, -1))
        flat = np.concatenate(picks)
        owner[t] = np.concatenate(own)
        u = (flat % W).astype(float)
        v = (flat // W).astype(float)
        query[t] = np.stack([u, v, depth[t].ravel()[flat]], axis=-1)

    total = np.zeros((L, N, S, 3))
    static = np.zeros((L, N, S, 3))
    world = np.zeros((L, N, S, 3))
    vis = np.zeros((L, N, S))
    for t in range(L):
        rays = np.stack([(query[t, :, 0] - K.cx) / K.fx, (query[t, :, 1] - K.cy) / K.fy,
                         np.ones(N)], axis=-1)
        P0 = poses[t].apply(rays * query[t, :, 2:3])
        for s in range(S):
            j = t - half + s
            if j < 0 or j >= L:
                continue
            Pj = P0.copy()
            for b, body in enumerate(bodies):
                sel = owner[t] == b
                if sel.any():
                    R, tr = body.relative(t, j)
                    Pj[sel] = P0[sel] @ R.T + tr
            world[t, :, s] = Pj
            inv = poses[j].inverse()
            tot, ok_t = _project_masked(Pj @ inv.R.T + inv.t, K)
            sta, _ = _project_masked(P0 @ inv.R.T + inv.t, K)
            total[t, :, s] = tot
            static[t, :, s] = sta
            vis[t, :, s] = ok_t & (tot[:, 0] >= 0) & (tot[:, 0] <= W - 1) \
                & (tot[:, 1] >= 0) & (tot[:, 1] <= H - 1)
        total[t, :, half] = query[t]
        static[t, :, half] = query[t]
        vis[t, :, half] = 1.0

    labels = (owner >= 0).astype(float)
    dynamic = np.where(labels[..., None, None] > 0, total - static, 0.0)
    if not np.all(vis[:, :, half].sum(axis=1) > 0):
        raise InfeasibleSceneError("a frame has no visible query points")
    tracks = TrackTensor(query, total, dynamic, vis, labels, K)
    return GroundTruth(cfg, K, poses, depth, ids, tracks, static, world, owner, bodies)


def _project_masked(q: np.ndarray, K: CameraIntrinsics):
    ok = q[:, 2] > 0
    out = np.zeros_like(q)
    z = np.where(ok, q[:, 2], 1.0)
    out[:, 0] = K.fx * q[:, 0] / z + K.cx
    out[:, 1] = K.fy * q[:, 1] / z + K.cy
    out[:, 2] = q[:, 2]
    out[~ok] = 0.0
    return out, ok


def corrupt_depth(gt: GroundTruth, spec: DepthCorruption | None = None, seed: int | None = None
                  ) -> CorruptedDepth:
    """Multiply every depth map by a smooth random field with values in ``[1-a, 1+a]``."""
    spec = spec or gt.config.depth_corruption
    seed = gt.config.seed if seed is None else seed
    L, H, W = gt.depth_maps.shape
    rng = substream(seed, "corruption")
    shape = (L,) + tuple(spec.grid)
    if spec.distribution == "extremes":
        r = rng.choice(np.array([-1.0, 1.0]), size=shape)
    else:
        r = rng.uniform(-1.0, 1.0, size=shape)
    grids = 1.0 + spec.amplitude * r
    fields_ = np.stack([upsample_grid(g, H, W) for g in grids])
    return CorruptedDepth(gt.depth_maps * fields_, grids, fields_)


def corrupt_tracks(gt, spec: TrackNoise | None = None, seed: int | None = None) -> TrackTensor:
    """Gaussian pixel noise, relative depth noise and label flips on a track tensor.

    Only in-range, off-center window steps are perturbed; the query entries
    stay exact and visibility is untouched.
    """
    tracks = gt.tracks if isinstance(gt, GroundTruth) else gt
    if spec is None:
        spec = gt.config.track_noise if isinstance(gt, GroundTruth) else TrackNoise()
    if seed is None:
        seed = gt.config.seed if isinstance(gt, GroundTruth) else 0
    rng = substream(seed, "track-noise")
    L, N, S, _ = tracks.total.shape
    eps_px = rng.standard_normal((L, N, S, 2))
    eps_d = rng.standard_normal((L, N, S))
    flips = rng.uniform(size=(L, N)) < spec.label_flip

    sel = np.broadcast_to(tracks.in_range()[:, None, :], (L, N, S)).copy()
    sel[:, :, S // 2] = False
    total = tracks.total.copy()
    total[..., :2] += np.where(sel[..., None], spec.pixel_sigma * eps_px, 0.0)
    total[..., 2] *= np.where(sel, 1.0 + spec.depth_sigma * eps_d, 1.0)
    labels = np.where(flips, 1.0 - tracks.dynamic_label, tracks.dynamic_label)
    return tracks.with_(total=total, dynamic_label=labels)
