"""Trajectory alignment and error metrics: ATE, RPE and velocity difference.

Estimated and ground-truth trajectories are associated by nearest timestamp
(within 0.02 s, TUM convention), the estimate is aligned to the ground truth
with a closed-form similarity (or rigid) fit, and errors are reported as:

* ATE: RMSE of aligned position residuals;
* RPE: RMSE of frame-to-frame relative rotation angle (degrees) and
  relative translation norm;
* delta-v: mean norm of the per-frame velocity difference after alignment.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .geometry import Se3Pose, Trajectory, compose, matrix_to_quat, rotation_angle_between

ASSOCIATION_MAX_DT = 0.02  # seconds


@dataclass(frozen=True)
class AlignmentResult:
    rotation: np.ndarray   # unit quaternion
    translation: np.ndarray
    scale: float

    def transform_points(self, pts) -> np.ndarray:
        from .geometry import quat_to_matrix

        R = quat_to_matrix(self.rotation)
        return self.scale * (np.asarray(pts) @ R.T) + self.translation


@dataclass(frozen=True)
class MetricsReport:
    ate_rmse: float
    rpe_rot: float     # degrees
    rpe_trans: float   # scene units
    delta_v: float     # scene units per frame
    n_frames: int

    def to_dict(self) -> dict:
        return {
            "ate_rmse": self.ate_rmse,
            "rpe_rot": self.rpe_rot,
            "rpe_trans": self.rpe_trans,
            "delta_v": self.delta_v,
            "n_frames": self.n_frames,
        }


class DegenerateAlignment(ValueError):
    pass


def umeyama_align(est_positions, gt_positions, with_scale: bool = True) -> AlignmentResult:
    """Closed-form least-squares fit of s*R*est + t to gt.

    Cross-covariance SVD with the determinant sign fix; ``with_scale=False``
    pins s = 1 (rigid alignment).
    """
    x = np.asarray(est_positions, dtype=np.float64)
    y = np.asarray(gt_positions, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2 or x.shape[1] != 3:
        raise ValueError("position sets must both be (n, 3)")
    n = x.shape[0]
    if n < 3:
        raise ValueError("need at least 3 point pairs")
    mx, my = x.mean(axis=0), y.mean(axis=0)
    xc, yc = x - mx, y - my
    var_x = float(np.sum(xc * xc)) / n
    var_y = float(np.sum(yc * yc)) / n
    if var_x < 1e-18 or var_y < 1e-18:
        raise DegenerateAlignment("degenerate input: all points coincident")

    cov = (yc.T @ xc) / n
    U, d, Vt = np.linalg.svd(cov)
    sign = np.sign(np.linalg.det(U) * np.linalg.det(Vt)) or 1.0
    S = np.diag([1.0, 1.0, sign])
    R = U @ S @ Vt
    scale = float(np.trace(np.diag(d) @ S) / var_x) if with_scale else 1.0
    t = my - scale * (R @ mx)
    return AlignmentResult(rotation=matrix_to_quat(R), translation=t, scale=scale)


def associate(est: Trajectory, gt: Trajectory, max_dt: float = ASSOCIATION_MAX_DT):
    """Nearest-timestamp pairing; unmatched frames are dropped with a warning."""
    gt_ts = gt.timestamps
    pairs = []
    used = set()
    for i, ts in enumerate(est.timestamps):
        j = int(np.argmin(np.abs(gt_ts - ts)))
        if abs(gt_ts[j] - ts) <= max_dt and j not in used:
            pairs.append((i, j))
            used.add(j)
    dropped = len(est) - len(pairs)
    if dropped:
        warnings.warn(f"dropped {dropped} estimated frames without a ground-truth match")
    return pairs


def _paired_positions(est, gt, pairs):
    ei = [p[0] for p in pairs]
    gi = [p[1] for p in pairs]
    return est.positions()[ei], gt.positions()[gi]


def ate(est: Trajectory, gt: Trajectory, with_scale: bool = True) -> float:
    """RMSE of position residuals after aligning est to gt."""
    pairs = associate(est, gt)
    if len(pairs) < 3:
        raise ValueError(f"only {len(pairs)} associated pairs; need at least 3")
    pe, pg = _paired_positions(est, gt, pairs)
    align = umeyama_align(pe, pg, with_scale=with_scale)
    residual = align.transform_points(pe) - pg
    return float(np.sqrt(np.mean(np.sum(residual**2, axis=1))))


def rpe(est: Trajectory, gt: Trajectory, delta: int = 1):
    """(rotation RMSE in degrees, translation RMSE) of relative motions over delta frames."""
    if delta < 1:
        raise ValueError("delta must be >= 1")
    pairs = associate(est, gt)
    if len(pairs) < delta + 1:
        raise ValueError("too few associated pairs for the requested delta")
    rot_errs = []
    trans_errs = []
    for a in range(len(pairs) - delta):
        ei, gi = pairs[a]
        ej, gj = pairs[a + delta]
        rel_gt = compose(gt.poses[gi].inverse(), gt.poses[gj])
        rel_est = compose(est.poses[ei].inverse(), est.poses[ej])
        err = compose(rel_gt.inverse(), rel_est)
        rot_errs.append(rotation_angle_between(np.array([1.0, 0, 0, 0]), err.rotation))
        trans_errs.append(np.linalg.norm(err.translation))
    rot_rmse = float(np.degrees(np.sqrt(np.mean(np.square(rot_errs)))))
    trans_rmse = float(np.sqrt(np.mean(np.square(trans_errs))))
    return rot_rmse, trans_rmse


def delta_v(est: Trajectory, gt: Trajectory, with_scale: bool = True) -> float:
    """Mean norm of per-frame velocity differences after ATE-style alignment.

    Falls back to no alignment when either position set is degenerate
    (e.g. a perfectly static ground truth).
    """
    pairs = associate(est, gt)
    if len(pairs) < 3:
        raise ValueError(f"only {len(pairs)} associated pairs; need at least 3")
    pe, pg = _paired_positions(est, gt, pairs)
    try:
        align = umeyama_align(pe, pg, with_scale=with_scale)
        pe = align.transform_points(pe)
    except DegenerateAlignment:
        pass
    ve = np.diff(pe, axis=0)
    vg = np.diff(pg, axis=0)
    return float(np.mean(np.linalg.norm(ve - vg, axis=1)))


def evaluate_trajectories(est: Trajectory, gt: Trajectory, with_scale: bool = True) -> MetricsReport:
    pairs = associate(est, gt)
    return MetricsReport(
        ate_rmse=ate(est, gt, with_scale=with_scale),
        rpe_rot=rpe(est, gt)[0],
        rpe_trans=rpe(est, gt)[1],
        delta_v=delta_v(est, gt, with_scale=with_scale),
        n_frames=len(pairs),
    )
