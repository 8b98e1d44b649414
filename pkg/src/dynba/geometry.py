"""Pinhole camera model, SE(3) poses and Sim(3) alignment.

Conventions used throughout the package:

* A :class:`Pose` maps camera-frame coordinates to world coordinates
  (``X_world = R @ X_cam + t``).
* A 3D observation is stored as ``(u, v, d)``: pixel coordinates plus the
  z-depth in meters. :func:`project` returns the same triple, so reprojection
  residuals are three dimensional.
* Twists are ordered ``(rho, phi)``: three translational components followed
  by three rotational ones. Increments are applied on the right,
  ``T <- T @ exp(delta)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import BehindCameraError, DegenerateConfigurationError, InvalidDepthError

_SMALL_ANGLE = 1e-5


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


def hat(w: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of one 3-vector, or of a stack ``(..., 3)``."""
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def so3_exp(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    K = hat(phi)
    if theta < _SMALL_ANGLE:
        t2 = theta * theta
        a = 1.0 - t2 / 6.0
        b = 0.5 - t2 / 24.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * (K @ K)


def _left_jacobian(phi: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(phi)
    K = hat(phi)
    if theta < _SMALL_ANGLE:
        t2 = theta * theta
        b = 0.5 - t2 / 24.0
        c = 1.0 / 6.0 - t2 / 120.0
    else:
        b = (1.0 - np.cos(theta)) / (theta * theta)
        c = (theta - np.sin(theta)) / theta ** 3
    return np.eye(3) + b * K + c * (K @ K)


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Closest rotation matrix in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(R)
    Q = U @ Vt
    if np.linalg.det(Q) < 0:
        U[:, -1] *= -1
        Q = U @ Vt
    return Q


@dataclass(frozen=True)
class Pose:
    """Rigid camera-to-world transform."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "R", np.array(self.R, dtype=float).reshape(3, 3))
        object.__setattr__(self, "t", np.array(self.t, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_quaternion(cls, q_xyzw, t) -> "Pose":
        q = np.asarray(q_xyzw, dtype=float)
        return cls(Rotation.from_quat(q / np.linalg.norm(q)).as_matrix(), t)

    @property
    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    @property
    def quaternion(self) -> np.ndarray:
        """Unit quaternion in (x, y, z, w) order with non-negative w."""
        q = Rotation.from_matrix(self.R).as_quat()
        return -q if q[3] < 0 else q

    def inverse(self) -> "Pose":
        return se3_inverse(self)

    def __matmul__(self, other: "Pose") -> "Pose":
        return se3_compose(self, other)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Transform points ``(..., 3)`` from camera to world."""
        return np.asarray(X, dtype=float) @ self.R.T + self.t

    def is_valid(self, tol: float = 1e-9) -> bool:
        return (np.allclose(self.R.T @ self.R, np.eye(3), atol=tol)
                and abs(np.linalg.det(self.R) - 1.0) <= tol)


def se3_compose(a: Pose, b: Pose) -> Pose:
    return Pose(a.R @ b.R, a.R @ b.t + a.t)


def se3_inverse(a: Pose) -> Pose:
    return Pose(a.R.T, -a.R.T @ a.t)


def se3_exp(delta: np.ndarray) -> Pose:
    delta = np.asarray(delta, dtype=float)
    rho, phi = delta[:3], delta[3:]
    return Pose(so3_exp(phi), _left_jacobian(phi) @ rho)


def se3_log(T: Pose) -> np.ndarray:
    phi = Rotation.from_matrix(T.R).as_rotvec()
    rho = np.linalg.solve(_left_jacobian(phi), T.t)
    return np.concatenate([rho, phi])


def se3_retract(a: Pose, delta: np.ndarray) -> Pose:
    """Right-multiplicative update ``a @ exp(delta)`` with the rotation re-projected onto SO(3)."""
    T = se3_compose(a, se3_exp(delta))
    return Pose(orthonormalize(T.R), T.t)


@dataclass(frozen=True)
class Sim3Transform:
    scale: float
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("Sim(3) scale must be positive")
        object.__setattr__(self, "R", np.array(self.R, dtype=float).reshape(3, 3))
        object.__setattr__(self, "t", np.array(self.t, dtype=float).reshape(3))

    def apply(self, X: np.ndarray) -> np.ndarray:
        return self.scale * (np.asarray(X, dtype=float) @ self.R.T) + self.t

    def apply_pose(self, T: Pose) -> Pose:
        """Map a camera-to-world pose into the aligned frame (scale acts on translation only)."""
        return Pose(self.R @ T.R, self.scale * (self.R @ T.t) + self.t)


def umeyama_sim3(src, dst) -> Sim3Transform:
    """Closed-form least-squares similarity with ``dst ~ s * R @ src + t``."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("src and dst must both have shape (n, 3)")
    n = src.shape[0]
    if n < 3:
        raise DegenerateConfigurationError(f"need at least 3 correspondences, got {n}")

    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    var_s = np.sum(xs * xs) / n
    cov = xd.T @ xs / n
    U, D, Vt = np.linalg.svd(cov)
    if var_s <= 0 or np.linalg.matrix_rank(cov, tol=1e-12 * max(D[0], 1e-300)) < 2:
        raise DegenerateConfigurationError("point configuration is degenerate (collinear or coincident)")

    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = np.trace(np.diag(D) @ S) / var_s
    t = mu_d - s * R @ mu_s
    return Sim3Transform(float(s), R, t)


def _check_depth(d):
    if np.any(~(np.asarray(d) > 0)):
        raise InvalidDepthError("depth must be strictly positive")


def back_project(p, k: CameraIntrinsics) -> np.ndarray:
    """Lift ``(u, v, d)`` to camera-frame meters. Accepts a single triple or a stack ``(..., 3)``."""
    p = np.asarray(p, dtype=float)
    u, v, d = p[..., 0], p[..., 1], p[..., 2]
    _check_depth(d)
    return np.stack([d * (u - k.cx) / k.fx, d * (v - k.cy) / k.fy, d], axis=-1)


def project(q, k: CameraIntrinsics) -> np.ndarray:
    """Camera-frame point(s) to ``(u, v, d)``."""
    q = np.asarray(q, dtype=float)
    z = q[..., 2]
    if np.any(~(z > 0)):
        raise BehindCameraError("point lies on or behind the image plane")
    return np.stack([k.fx * q[..., 0] / z + k.cx, k.fy * q[..., 1] / z + k.cy, z], axis=-1)


def relative_pose(Ti: Pose, Tj: Pose) -> Pose:
    """Transform taking frame-i camera coordinates to frame-j camera coordinates."""
    return se3_compose(se3_inverse(Tj), Ti)


def reproject(x, y, Ti: Pose, Tj: Pose, k: CameraIntrinsics) -> np.ndarray:
    """Observe pixel ``x`` at depth ``y`` in frame i and return where it lands in frame j."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    p = back_project(np.concatenate([x[..., :2], y[..., None]], axis=-1), k)
    if Ti is Tj or (np.array_equal(Ti.R, Tj.R) and np.array_equal(Ti.t, Tj.t)):
        # same camera: the round trip is the identity, return it without rounding noise
        return np.concatenate([x[..., :2], y[..., None]], axis=-1)
    rel = relative_pose(Ti, Tj)
    return project(p @ rel.R.T + rel.t, k)


def ray_directions(uv, k: CameraIntrinsics) -> np.ndarray:
    """Unit-depth rays ``((u-cx)/fx, (v-cy)/fy, 1)``."""
    uv = np.asarray(uv, dtype=float)
    return np.stack([(uv[..., 0] - k.cx) / k.fx, (uv[..., 1] - k.cy) / k.fy,
                     np.ones(uv.shape[:-1])], axis=-1)


def poses_to_arrays(poses) -> tuple[np.ndarray, np.ndarray]:
    R = np.stack([p.R for p in poses])
    t = np.stack([p.t for p in poses])
    return R, t


def rotation_angle_deg(R: np.ndarray) -> np.ndarray:
    """Geodesic angle of one rotation or a stack of them, in degrees."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R, axis1=-2, axis2=-1)
    c = np.clip((tr - 1.0) / 2.0, -1.0, 1.0)
    # arccos loses precision near zero; use the skew part there.
    skew = np.stack([R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0],
                     R[..., 1, 0] - R[..., 0, 1]], axis=-1)
    s = np.linalg.norm(skew, axis=-1) / 2.0
    return np.degrees(np.arctan2(s, c))
