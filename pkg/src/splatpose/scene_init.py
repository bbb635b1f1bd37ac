"""Canonical-frame scene construction.

Lifts a masked depth map (or an external point cloud) into 3D points in the
canonical camera frame, seeds one Gaussian per point, fits the scene to the
canonical frame's target map by first-order descent, and freezes it for the
pose optimizer.  Also hosts the PCA reduction that turns raw C-channel
feature maps into f-channel optimization targets.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import CameraIntrinsics, Se3Pose, quat_from_rotvec, quat_multiply
from .losses import masked_mse_with_gradient
from .optim import Adam
from .rasterizer import rasterize, rasterize_backward
from .scene import GaussianScene, PlanarMap, as_map_data, logit


@dataclass(frozen=True)
class LiftConfig:
    pixel_stride: int = 2
    mask_threshold: float = 0.5
    init_opacity: float = 0.5
    scale_knn: int = 3

    def __post_init__(self):
        if self.pixel_stride < 1:
            raise ValueError("pixel_stride must be >= 1")
        if not 0.0 <= self.mask_threshold <= 1.0:
            raise ValueError("mask_threshold must be in [0, 1]")
        if not 0.0 < self.init_opacity < 1.0:
            raise ValueError("init_opacity must be in (0, 1)")
        if self.scale_knn < 1:
            raise ValueError("scale_knn must be >= 1")


def lift_depth(depth, mask, K: CameraIntrinsics, payload_source, cfg: LiftConfig = LiftConfig()):
    """Unproject masked depth pixels into the camera frame.

    Returns (points (n, 3), payloads (n, k)).  Pixels are sampled every
    ``pixel_stride`` along both axes; a pixel is kept when its mask value is
    at least ``mask_threshold`` and its depth is positive.
    """
    d = as_map_data(depth, channels=1)[:, :, 0]
    m = as_map_data(mask, channels=1)[:, :, 0]
    src = as_map_data(payload_source)
    if d.shape != (K.height, K.width) or m.shape != d.shape or src.shape[:2] != d.shape:
        raise ValueError("depth/mask/payload dimensions do not match intrinsics")
    vs, us = np.mgrid[0 : K.height : cfg.pixel_stride, 0 : K.width : cfg.pixel_stride]
    vs, us = vs.ravel(), us.ravel()
    keep = (m[vs, us] >= cfg.mask_threshold) & (d[vs, us] > 0)
    if not np.any(keep):
        raise ValueError("no static pixels: everything masked out or zero depth")
    us, vs = us[keep], vs[keep]
    z = d[vs, us]
    points = np.column_stack([(us - K.cx) * z / K.fx, (vs - K.cy) * z / K.fy, z])
    return points, src[vs, us, :].astype(np.float64)


def init_gaussians(points, payloads, cfg: LiftConfig = LiftConfig()) -> GaussianScene:
    """One isotropic Gaussian per lifted point.

    Initial std-dev is the mean distance to the ``scale_knn`` nearest
    neighbors (floored at 1e-6); a lone point falls back to 1e-2.
    """
    points = np.asarray(points, dtype=np.float64)
    payloads = np.asarray(payloads, dtype=np.float64)
    n = points.shape[0]
    if n == 0:
        raise ValueError("empty point list")
    if n == 1:
        scales = np.array([1e-2])
    else:
        knn = min(cfg.scale_knn, n - 1)
        dist, _ = cKDTree(points).query(points, k=knn + 1)
        scales = np.maximum(dist[:, 1:].mean(axis=1), 1e-6)
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    return GaussianScene(
        means=points,
        rotations=rot,
        log_scales=np.log(scales)[:, None].repeat(3, axis=1),
        opacity_logits=np.full(n, float(logit(cfg.init_opacity))),
        payloads=payloads,
    )


def load_pointcloud(path):
    """Read an N x (3 + k) tensor file into (points, payloads)."""
    from .interchange import read_tensor

    arr = read_tensor(path)
    if arr.ndim != 2 or arr.shape[1] < 4:
        raise ValueError(f"pointcloud must be N x (3 + k) with k >= 1, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError("empty pointcloud file")
    arr = arr.astype(np.float64)
    return arr[:, :3], arr[:, 3:]


# learning-rate multipliers relative to the base payload rate; means move on
# a per-scene metric scale (fraction of median depth)
_FIT_LR_GROUPS = {"payloads": 1.0, "opacity_logits": 10.0, "log_scales": 2.0, "rot_tangents": 0.4}
_FIT_MEAN_LR_DEPTH_FRACTION = 0.01


def fit_canonical(scene: GaussianScene, target, mask, K: CameraIntrinsics,
                  iters: int = 300, lr: float = 0.005,
                  mask_threshold: float = 0.5, background=0.0) -> GaussianScene:
    """Optimize all Gaussian parameters against the canonical frame, then freeze.

    The loss is the masked MSE between the identity-view render and
    ``target``.  Returns the best-loss parameters seen, as a frozen scene.
    """
    if scene.frozen:
        raise ValueError("scene is already frozen; refusing to fit")
    t = as_map_data(target, channels=scene.payload_dim)
    m = as_map_data(mask, channels=1)
    if np.count_nonzero(m[:, :, 0] >= mask_threshold) == 0:
        raise ValueError("fully-masked target")

    params = {
        "means": scene.means.copy(),
        "rotations": scene.rotations.copy(),
        "log_scales": scene.log_scales.copy(),
        "opacity_logits": scene.opacity_logits.copy(),
        "payloads": scene.payloads.copy(),
    }
    median_depth = float(np.median(np.abs(params["means"][:, 2]))) or 1.0
    opt = Adam(
        {
            "means": ((len(scene), 3), lr * _FIT_MEAN_LR_DEPTH_FRACTION * median_depth),
            "rot_tangents": ((len(scene), 3), lr * _FIT_LR_GROUPS["rot_tangents"]),
            "log_scales": ((len(scene), 3), lr * _FIT_LR_GROUPS["log_scales"]),
            "opacity_logits": ((len(scene),), lr * _FIT_LR_GROUPS["opacity_logits"]),
            "payloads": ((len(scene), scene.payload_dim), lr * _FIT_LR_GROUPS["payloads"]),
        }
    )

    view = Se3Pose.identity()
    best_loss = np.inf
    best_params = {k: v.copy() for k, v in params.items()}
    history = []
    monitor_tripped = False
    for it in range(iters):
        work = GaussianScene(**params)
        out = rasterize(work, view, K, background=background)
        loss, upstream = masked_mse_with_gradient(out.map, t, m, mask_threshold)
        history.append(loss)
        if loss < best_loss:
            best_loss = loss
            best_params = {k: v.copy() for k, v in params.items()}
        if not monitor_tripped and it >= 50 and history[-1] > history[-51] / 0.999:
            monitor_tripped = True
            warnings.warn(
                f"canonical fit loss rose over iterations {it - 50}..{it} "
                f"({history[-51]:.3e} -> {history[-1]:.3e})"
            )
        _, sg = rasterize_backward(work, view, K, upstream, out.aux,
                                   background=background, wrt_gaussians=True)
        upd = opt.step(
            {
                "means": sg.means,
                "rot_tangents": sg.rot_tangents,
                "log_scales": sg.log_scales,
                "opacity_logits": sg.opacity_logits,
                "payloads": sg.payloads,
            }
        )
        params["means"] = params["means"] + upd["means"]
        params["log_scales"] = params["log_scales"] + upd["log_scales"]
        params["opacity_logits"] = params["opacity_logits"] + upd["opacity_logits"]
        params["payloads"] = params["payloads"] + upd["payloads"]
        rots = params["rotations"].copy()
        for i in range(len(scene)):
            delta = upd["rot_tangents"][i]
            if np.any(delta):
                rots[i] = quat_multiply(quat_from_rotvec(delta), rots[i])
        params["rotations"] = rots

    # keep the evaluated optimum (guarantees final loss <= initial loss)
    final = GaussianScene(**best_params)
    out = rasterize(final, view, K, background=background, record_aux=False)
    final_loss, _ = masked_mse_with_gradient(out.map, t, m, mask_threshold)
    if final_loss < best_loss:
        best_loss = final_loss
    return final.freeze()


def pca_select_channels(features, f: int):
    """Project pooled pixels of C-channel maps onto the top f principal axes.

    All frames are pooled, mean-centered and projected with one shared basis;
    each output channel is then standardized to zero mean and unit variance
    across the pool.  Returns (reduced maps, basis (f, C)).
    """
    maps = [as_map_data(m) for m in features]
    if not maps:
        raise ValueError("no feature maps given")
    h, w, c = maps[0].shape
    if any(m.shape != (h, w, c) for m in maps):
        raise ValueError("all feature maps must share dimensions")
    if not 1 <= f <= c:
        raise ValueError(f"need 1 <= f <= {c}, got f={f}")

    pooled = np.concatenate([m.reshape(-1, c) for m in maps], axis=0)
    mean = pooled.mean(axis=0)
    centered = pooled - mean
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    rank = int(np.sum(svals > svals[0] * 1e-12)) if svals.size and svals[0] > 0 else 0
    basis = vt[:f].copy()
    if rank < f:
        warnings.warn(f"feature covariance rank {rank} < requested {f}; padding with zeros")
        basis[rank:] = 0.0

    projected = centered @ basis.T
    std = projected.std(axis=0)
    safe = np.where(std > 1e-12, std, 1.0)
    projected = (projected - projected.mean(axis=0)) / safe

    out = []
    offset = 0
    for _ in maps:
        out.append(PlanarMap(projected[offset : offset + h * w].reshape(h, w, f)))
        offset += h * w
    return out, basis
