"""Rigid transforms, the pinhole model and the point maps shared by all residuals.

Conventions
-----------
* Quaternions are stored ``(w, x, y, z)`` and kept at unit norm.
* A station pose ``T_i`` maps camera-frame points into the world frame
  (camera-to-world). The world frame is the frame of camera 0.
* The extrinsic ``T_e`` maps LiDAR-frame points into the camera frame, so the
  LiDAR-to-world map of station ``i`` is ``T_i T_e``.
* Camera frame: ``z`` forward, ``x`` right, ``y`` down.
* Pose increments are 6-vectors ``(rho, theta)``: translation is additive and
  the rotation is updated on the left, ``R <- Exp(theta) R``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import NonPositiveDepth

_QUAT_TOL = 1e-9
MIN_DEPTH = 1e-9


def skew(v):
    """Cross-product matrix; works on (3,) or (n, 3) input."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n < 1e-12:
        raise ValueError(f"cannot normalize quaternion {q}")
    q = q / n
    # canonical hemisphere keeps equal rotations byte-identical
    if q[0] < 0:
        q = -q
    return q


def quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R):
    """Shepperd's method; the input must be a proper rotation."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return quat_normalize(q)


def quat_from_rotvec(v):
    v = np.asarray(v, dtype=float)
    angle = np.linalg.norm(v)
    if angle < 1e-12:
        # second-order accurate near zero
        return quat_normalize(np.concatenate([[1.0], 0.5 * v]))
    axis = v / angle
    return quat_normalize(np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis]))


def so3_exp(v):
    """Rodrigues formula, rotation vector -> matrix."""
    return quat_to_matrix(quat_from_rotvec(v))


def so3_log(R):
    """Rotation matrix -> rotation vector with angle in [0, pi]."""
    q = matrix_to_quat(R)
    w = np.clip(q[0], -1.0, 1.0)
    vec = q[1:]
    s = np.linalg.norm(vec)
    if s < 1e-12:
        return 2.0 * vec
    angle = 2.0 * np.arctan2(s, w)
    return vec / s * angle


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``x -> R x + t`` stored as unit quaternion + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        q = quat_normalize(self.rotation)
        t = np.asarray(self.translation, dtype=float).reshape(3).copy()
        q.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_rt(cls, R, t=(0.0, 0.0, 0.0)):
        return cls(matrix_to_quat(R), t)

    @classmethod
    def from_rotvec(cls, rotvec, t=(0.0, 0.0, 0.0)):
        return cls(quat_from_rotvec(rotvec), t)

    @classmethod
    def from_matrix(cls, M):
        M = np.asarray(M, dtype=float)
        return cls.from_rt(M[:3, :3], M[:3, 3])

    @cached_property
    def R(self):
        R = quat_to_matrix(self.rotation)
        R.setflags(write=False)
        return R

    @property
    def t(self):
        return self.translation

    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.translation
        return M

    def rotvec(self):
        return so3_log(self.R)

    def as_vector(self):
        """7 components ``(qw, qx, qy, qz, tx, ty, tz)``."""
        return np.concatenate([self.rotation, self.translation])

    def boxplus(self, delta):
        """Apply a 6-vector increment ``(rho, theta)``."""
        delta = np.asarray(delta, dtype=float)
        q = quat_multiply(quat_from_rotvec(delta[3:]), self.rotation)
        return Pose(q, self.translation + delta[:3])

    def __matmul__(self, other):
        return compose(self, other)

    def __repr__(self):
        q = np.array2string(self.rotation, precision=6)
        t = np.array2string(self.translation, precision=6)
        return f"Pose(q={q}, t={t})"

    def to_dict(self):
        return {"rotation": [float(x) for x in self.rotation],
                "translation": [float(x) for x in self.translation]}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["rotation"], dtype=float), np.asarray(d["translation"], dtype=float))


def compose(a: Pose, b: Pose) -> Pose:
    """``a ∘ b``: apply ``b`` first, then ``a``."""
    q = quat_multiply(a.rotation, b.rotation)
    return Pose(q, a.R @ b.translation + a.translation)


def inverse(p: Pose) -> Pose:
    q = p.rotation * np.array([1.0, -1.0, -1.0, -1.0])
    return Pose(q, -(p.R.T @ p.translation))


def transform_point(p, T: Pose):
    """``R p + t`` for a single point or an (n, 3) array."""
    p = np.asarray(p, dtype=float)
    return p @ T.R.T + T.translation


def relative_cloud_transform(Ti: Pose, Tj: Pose, Te: Pose) -> Pose:
    """Map from the LiDAR frame of source station ``j`` into target station ``i``.

    Equals ``(Ti Te)^-1 Tj Te``: LiDAR j -> camera j -> world -> camera i -> LiDAR i.
    """
    return compose(inverse(compose(Ti, Te)), compose(Tj, Te))


def pose_distance(a: Pose, b: Pose):
    """(translation error in meters, rotation error in radians)."""
    dt = float(np.linalg.norm(a.translation - b.translation))
    dr = float(np.linalg.norm(so3_log(a.R.T @ b.R)))
    return dt, dr


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    baseline: float = 1.0
    width: int | None = None
    height: int | None = None

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0 and self.baseline > 0):
            raise ValueError("fx, fy and baseline must be positive")

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self):
        return {k: getattr(self, k) for k in ("fx", "fy", "cx", "cy", "baseline", "width", "height")}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in ("fx", "fy", "cx", "cy", "baseline", "width", "height") if k in d})


@dataclass(frozen=True)
class Landmark:
    id: int
    position: np.ndarray


def pinhole(xc, K: CameraIntrinsics):
    """Project camera-frame points (..., 3) to pixels (..., 2). No depth check."""
    xc = np.asarray(xc, dtype=float)
    z = xc[..., 2]
    return np.stack([K.fx * xc[..., 0] / z + K.cx, K.fy * xc[..., 1] / z + K.cy], axis=-1)


def project(landmark, T: Pose, K: CameraIntrinsics):
    """Map a world point into the camera with ``T`` (world-to-camera) and project it.

    Raises ``NonPositiveDepth`` when the camera-frame point is not in front of the
    camera.
    """
    pos = landmark.position if isinstance(landmark, Landmark) else landmark
    xc = transform_point(pos, T)
    if np.any(xc[..., 2] <= MIN_DEPTH):
        raise NonPositiveDepth(f"point at camera depth {np.min(xc[..., 2]):.3g} is behind the camera")
    return pinhole(xc, K)


def back_project(pixel, depth, K: CameraIntrinsics, depth_mode="range"):
    """Camera-frame point for a pixel and a depth (range along the ray, or z)."""
    pixel = np.asarray(pixel, dtype=float)
    depth = np.asarray(depth, dtype=float)
    ray = np.stack([(pixel[..., 0] - K.cx) / K.fx, (pixel[..., 1] - K.cy) / K.fy,
                    np.ones(pixel.shape[:-1])], axis=-1)
    if depth_mode == "range":
        ray = ray / np.linalg.norm(ray, axis=-1, keepdims=True)
    elif depth_mode != "z":
        raise ValueError(f"unknown depth mode {depth_mode!r}")
    return ray * depth[..., None]
