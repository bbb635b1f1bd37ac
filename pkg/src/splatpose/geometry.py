"""Rigid transforms, quaternions, camera intrinsics and trajectories.

Conventions used everywhere in this package:

* quaternions are scalar-first ``(w, x, y, z)``, unit norm, canonicalized
  to the ``w >= 0`` hemisphere;
* ``Se3Pose`` maps points as ``R @ x + t``;
* trajectories store camera-to-world poses, the rasterizer consumes
  world-to-camera (view) transforms -- conversion is always explicit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

_QUAT_NORM_TOL = 1e-9


def normalize_quat(q) -> np.ndarray:
    """Return q scaled to unit norm and canonicalized to the w >= 0 hemisphere."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (4,):
        raise ValueError(f"quaternion must have shape (4,), got {q.shape}")
    n = float(np.linalg.norm(q))
    if not np.isfinite(n) or n < 1e-12:
        raise ValueError("zero or non-finite quaternion")
    q = q / n
    # deterministic hemisphere: flip so the first nonzero component is positive
    for v in q:
        if v > 0.0:
            break
        if v < 0.0:
            q = -q
            break
    return q


def quat_multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conjugate(q) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q) -> np.ndarray:
    """3x3 rotation matrix of a unit quaternion. Rejects the zero quaternion."""
    q = normalize_quat(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R) -> np.ndarray:
    """Inverse of quat_to_matrix (Shepperd's branch selection)."""
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise ValueError("rotation matrix must be 3x3")
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] >= R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return normalize_quat(q)


def quat_from_axis_angle(axis, angle_rad: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n < 1e-12:
        if abs(angle_rad) > 1e-12:
            raise ValueError("zero axis with nonzero angle")
        return np.array([1.0, 0.0, 0.0, 0.0])
    half = 0.5 * angle_rad
    return normalize_quat(np.concatenate([[math.cos(half)], math.sin(half) * axis / n]))


def quat_from_rotvec(v) -> np.ndarray:
    """Quaternion of a rotation vector (axis * angle), stable for small angles."""
    v = np.asarray(v, dtype=np.float64)
    angle = float(np.linalg.norm(v))
    if angle < 1e-12:
        # second-order series keeps exp/log round trips accurate near zero
        return normalize_quat(np.concatenate([[1.0 - angle * angle / 8.0], 0.5 * v]))
    return quat_from_axis_angle(v, angle)


def quat_angle(q) -> float:
    """Rotation angle in radians represented by a unit quaternion (>= 0)."""
    q = normalize_quat(q)
    return 2.0 * math.atan2(float(np.linalg.norm(q[1:])), abs(float(q[0])))


def rotation_angle_between(qa, qb) -> float:
    """Angle in radians between the rotations of two unit quaternions."""
    return quat_angle(quat_multiply(quat_conjugate(qa), qb))


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


@dataclass(frozen=True)
class Se3Pose:
    """Rigid transform: rotation (unit quaternion, scalar-first) + translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = normalize_quat(self.rotation)
        t = np.asarray(self.translation, dtype=np.float64)
        if t.shape != (3,):
            raise ValueError(f"translation must have shape (3,), got {t.shape}")
        if not np.all(np.isfinite(t)):
            raise ValueError("non-finite translation")
        q.setflags(write=False)
        t = t.copy()
        t.setflags(write=False)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Se3Pose":
        return Se3Pose()

    @staticmethod
    def from_matrix(T) -> "Se3Pose":
        T = np.asarray(T, dtype=np.float64)
        if T.shape != (4, 4):
            raise ValueError("expected 4x4 homogeneous matrix")
        return Se3Pose(matrix_to_quat(T[:3, :3]), T[:3, 3])

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation_matrix()
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "Se3Pose":
        qc = quat_conjugate(self.rotation)
        return Se3Pose(qc, -(quat_to_matrix(qc) @ self.translation))


def compose(a: Se3Pose, b: Se3Pose) -> Se3Pose:
    """Rigid map applying b then a: apply(compose(a, b), x) == apply(a, apply(b, x))."""
    return Se3Pose(
        quat_multiply(a.rotation, b.rotation),
        a.rotation_matrix() @ b.translation + a.translation,
    )


def apply(p: Se3Pose, x) -> np.ndarray:
    """R @ x + t for a single 3-vector x."""
    return p.rotation_matrix() @ np.asarray(x, dtype=np.float64) + p.translation


def se3_exp_increment(xi) -> Se3Pose:
    """Pose of a 6-vector tangent increment (3 rotation, 3 translation).

    Rotation part is the SO(3) exponential of xi[:3]; translation is taken
    verbatim (the split parameterization used by the pose optimizer, not the
    full SE(3) exponential).
    """
    xi = np.asarray(xi, dtype=np.float64)
    if xi.shape != (6,):
        raise ValueError("tangent increment must have shape (6,)")
    return Se3Pose(quat_from_rotvec(xi[:3]), xi[3:])


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole model: focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


class Trajectory:
    """Timestamped sequence of camera-to-world poses."""

    def __init__(self, timestamps, poses):
        timestamps = np.asarray(timestamps, dtype=np.float64)
        poses = list(poses)
        if timestamps.ndim != 1 or len(poses) != timestamps.shape[0]:
            raise ValueError("timestamps and poses must have equal length")
        if len(poses) < 1:
            raise ValueError("trajectory needs at least one pose")
        if np.any(np.diff(timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        timestamps.setflags(write=False)
        self.timestamps = timestamps
        self.poses = poses

    def __len__(self):
        return len(self.poses)

    def __iter__(self):
        return iter(zip(self.timestamps, self.poses))

    def positions(self) -> np.ndarray:
        """(n, 3) camera centers in world coordinates."""
        return np.array([p.translation for p in self.poses])
