"""Windowed 3D point tracks, motion decoupling and BA confidence weights.

Frames are indexed from 0. A window of ``S = 2*S' + 1`` steps centered on
source frame ``t`` covers frames ``t - S' .. t + S'``; steps falling outside
``[0, L)`` are truncated: their entries are zero and their visibility is 0.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DomainError
from .geometry import CameraIntrinsics


def _check_unit_interval(name, x):
    x = np.asarray(x, dtype=float)
    if np.any(~((x >= 0.0) & (x <= 1.0))):
        raise DomainError(f"{name} must lie in [0, 1]")


def decouple(total, dyn, m):
    """Static component ``total - m * dyn`` of a track point (or stacks of them)."""
    _check_unit_interval("dynamic label", m)
    total = np.asarray(total, dtype=float)
    dyn = np.asarray(dyn, dtype=float)
    m = np.asarray(m, dtype=float)
    return total - m.reshape(m.shape + (1,) * (total.ndim - m.ndim)) * dyn


def ba_weight(visibility, m):
    """Soft BA weight ``v * (1 - m)``."""
    _check_unit_interval("visibility", visibility)
    _check_unit_interval("dynamic label", m)
    return np.asarray(visibility, dtype=float) * (1.0 - np.asarray(m, dtype=float))


def pose_mask(visibility, m, delta_v=0.9, delta_m=0.9):
    """Hard gate used for pose-block contributions (broadcasting)."""
    _check_unit_interval("delta_v", delta_v)
    _check_unit_interval("delta_m", delta_m)
    return (np.asarray(visibility) >= delta_v) & ((1.0 - np.asarray(m)) >= delta_m)


@dataclass(frozen=True)
class TrackWindow:
    source_frame: int
    query: np.ndarray          # (3,) u, v, d
    total: np.ndarray          # (S, 3)
    dynamic: np.ndarray        # (S, 3) displacement
    visibility: np.ndarray     # (S,)
    dynamic_label: float

    @property
    def static(self) -> np.ndarray:
        return decouple(self.total, self.dynamic, self.dynamic_label)


def pose_update_mask(window: TrackWindow, delta_v: float = 0.9, delta_m: float = 0.9) -> np.ndarray:
    return pose_mask(window.visibility, window.dynamic_label, delta_v, delta_m)


@dataclass(frozen=True)
class TrackTensor:
    """All windows of a sequence, stored as dense arrays.

    Shapes: ``query (L, N, 3)``, ``total``/``dynamic`` ``(L, N, S, 3)``,
    ``visibility (L, N, S)``, ``dynamic_label (L, N)``.
    """

    query: np.ndarray
    total: np.ndarray
    dynamic: np.ndarray
    visibility: np.ndarray
    dynamic_label: np.ndarray
    intrinsics: CameraIntrinsics | None = None

    def __post_init__(self):
        L, N, S, three = self.total.shape
        if three != 3 or S % 2 != 1:
            raise ValueError(f"total must be (L, N, S, 3) with odd S, got {self.total.shape}")
        if self.query.shape != (L, N, 3) or self.dynamic.shape != self.total.shape:
            raise ValueError("inconsistent track array shapes")
        if self.visibility.shape != (L, N, S) or self.dynamic_label.shape != (L, N):
            raise ValueError("inconsistent visibility/label shapes")
        _check_unit_interval("visibility", self.visibility)
        _check_unit_interval("dynamic label", self.dynamic_label)
        for name in ("query", "total", "dynamic", "visibility", "dynamic_label"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def sequence_length(self) -> int:
        return self.total.shape[0]

    @property
    def queries_per_frame(self) -> int:
        return self.total.shape[1]

    @property
    def window_size(self) -> int:
        return self.total.shape[2]

    @property
    def half_window(self) -> int:
        return self.window_size // 2

    def step_frames(self) -> np.ndarray:
        """``(L, S)`` frame index of every window step (may fall outside the sequence)."""
        L, S = self.sequence_length, self.window_size
        return np.arange(L)[:, None] - self.half_window + np.arange(S)[None, :]

    def in_range(self) -> np.ndarray:
        f = self.step_frames()
        return (f >= 0) & (f < self.sequence_length)

    def static(self) -> np.ndarray:
        return decouple(self.total, self.dynamic, self.dynamic_label)

    def window(self, t: int, n: int) -> TrackWindow:
        return TrackWindow(t, self.query[t, n].copy(), self.total[t, n].copy(),
                           self.dynamic[t, n].copy(), self.visibility[t, n].copy(),
                           float(self.dynamic_label[t, n]))

    def with_(self, **changes) -> "TrackTensor":
        return replace(self, **changes)

    def decoupled(self) -> "TrackTensor":
        """Tensor whose total tracks are the static components and dynamic parts are zero."""
        return replace(self, total=self.static(), dynamic=np.zeros_like(self.dynamic))

    def equals(self, other: "TrackTensor") -> bool:
        return all(np.array_equal(getattr(self, a), getattr(other, a))
                   for a in ("query", "total", "dynamic", "visibility", "dynamic_label"))


def bilinear_sample(image: np.ndarray, uv) -> np.ndarray:
    """Sample ``image[v, u]`` at continuous pixel coordinates; integer coordinates hit pixel centers.

    Coordinates outside the image are clamped to the border.
    """
    image = np.asarray(image, dtype=float)
    uv = np.asarray(uv, dtype=float)
    H, W = image.shape
    u = np.clip(uv[..., 0], 0.0, W - 1.0)
    v = np.clip(uv[..., 1], 0.0, H - 1.0)
    u0 = np.minimum(np.floor(u).astype(np.int64), max(W - 2, 0))
    v0 = np.minimum(np.floor(v).astype(np.int64), max(H - 2, 0))
    u1 = np.minimum(u0 + 1, W - 1)
    v1 = np.minimum(v0 + 1, H - 1)
    a = u - u0
    b = v - v0
    return ((1 - a) * (1 - b) * image[v0, u0] + a * (1 - b) * image[v0, u1]
            + (1 - a) * b * image[v1, u0] + a * b * image[v1, u1])


def sample_queries(depth: np.ndarray, n: int, mode: str = "grid", seed: int = 0,
                   jitter: float = 1.0) -> np.ndarray:
    """Pick ``n`` query points ``(u, v, d)`` from a depth map.

    Grid mode places one query at the center of each cell of a
    ``ceil(sqrt(n))``-per-side lattice, displaced by up to ``jitter`` half-cells;
    when the lattice has more cells than ``n`` a seeded subset is kept in
    row-major order. Random mode draws uniform continuous pixel positions.
    """
    depth = np.asarray(depth, dtype=float)
    H, W = depth.shape
    if n < 1:
        raise ValueError("n must be at least 1")
    if n > H * W:
        raise ValueError(f"cannot draw {n} queries from a {H}x{W} depth map")
    rng = np.random.default_rng(seed)
    if mode == "grid":
        side = int(np.ceil(np.sqrt(n)))
        cw, ch = W / side, H / side
        jj, ii = np.meshgrid(np.arange(side), np.arange(side))
        u = (jj.ravel() + 0.5) * cw
        v = (ii.ravel() + 0.5) * ch
        if side * side > n:
            keep = np.sort(rng.choice(side * side, size=n, replace=False))
            u, v = u[keep], v[keep]
        if jitter > 0:
            u = u + rng.uniform(-0.5, 0.5, size=u.shape) * jitter * cw
            v = v + rng.uniform(-0.5, 0.5, size=v.shape) * jitter * ch
        u = np.clip(u, 0.0, W - 1.0)
        v = np.clip(v, 0.0, H - 1.0)
    elif mode == "random":
        u = rng.uniform(0.0, W - 1.0, size=n)
        v = rng.uniform(0.0, H - 1.0, size=n)
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    uv = np.stack([u, v], axis=-1)
    return np.concatenate([uv, bilinear_sample(depth, uv)[:, None]], axis=-1)
