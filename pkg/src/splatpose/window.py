"""Batched sliding-window pose estimation over a frozen Gaussian scene.

A window holds ``b`` consecutive frames; the first (canonical) frame's pose
is pinned to identity and the remaining ``b - 1`` relative poses are
optimized jointly with Adam on 6-vector tangent increments.  The objective
is the sum of per-frame masked MSE terms, an SSIM quality term averaged over
frames, and a second-difference smoothness penalty on camera centers whose
weight ramps linearly from 0 to ``lambda_c_max`` over the iterations.
Consecutive windows share exactly one frame and are chained into a global
camera-to-world trajectory.

The tangent chart used by the optimizer takes rotations about the scene
centroid rather than the camera center: at small baselines a camera-centered
yaw and a lateral translation produce nearly identical images, and the
centroid pivot turns that flat valley into single coordinates that a
per-coordinate adaptive step handles well.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    CameraIntrinsics,
    Se3Pose,
    Trajectory,
    apply,
    compose,
    quat_from_rotvec,
    quat_to_matrix,
    se3_exp_increment,
)
from .interchange import DatasetLayout, RunConfig
from .losses import masked_mse_with_gradient, smoothness_loss_with_gradient, ssim_loss_with_gradient
from .optim import Adam, exponential_decay
from .rasterizer import rasterize, rasterize_backward
from .scene import GaussianScene, PlanarMap, as_map_data
from .scene_init import LiftConfig, fit_canonical, init_gaussians, lift_depth, load_pointcloud, pca_select_channels

THREADS_ENV = "SMALLGS_THREADS"


@dataclass(frozen=True)
class WindowConfig:
    window_size: int = 15
    iters: int = 400
    lr_rot: float = 3e-3
    lr_trans: float = 3e-3
    lr_decay: float = 0.003
    lambda_s: float = 0.2
    lambda_c_max: float = 1.0
    loss_space: str = "rgb"
    mask_threshold: float = 0.5
    background: float = 0.0
    ssim_channels: str = "average"

    def __post_init__(self):
        if self.window_size < 2:
            raise ValueError("window_size must be >= 2")
        if self.lambda_s < 0 or self.lambda_c_max < 0:
            raise ValueError("loss weights must be >= 0")
        if self.loss_space not in ("rgb", "feature"):
            raise ValueError(f"unknown loss_space '{self.loss_space}'")

    @staticmethod
    def from_run_config(cfg: RunConfig) -> "WindowConfig":
        return WindowConfig(
            window_size=cfg.window_size,
            iters=cfg.iters,
            lr_rot=cfg.lr_rot,
            lr_trans=cfg.lr_trans,
            lr_decay=cfg.lr_decay,
            lambda_s=cfg.lambda_s,
            lambda_c_max=cfg.lambda_c_max,
            loss_space=cfg.loss_space,
            mask_threshold=cfg.mask_threshold,
            background=cfg.background,
            ssim_channels=cfg.ssim_channels,
        )


@dataclass(frozen=True)
class WindowEstimate:
    """Relative poses of one segment: canonical camera frame -> frame camera frame."""

    canonical_index: int
    relative_poses: list
    history: dict | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if len(self.relative_poses) < 1:
            raise ValueError("window needs at least one pose")
        first = self.relative_poses[0]
        if not (np.array_equal(first.rotation, [1.0, 0.0, 0.0, 0.0])
                and np.array_equal(first.translation, [0.0, 0.0, 0.0])):
            raise ValueError("first relative pose must be exactly identity")


def camera_centers(poses) -> np.ndarray:
    """Camera positions of world-to-camera transforms: -R^T t per pose."""
    return np.array([-(p.rotation_matrix().T @ p.translation) for p in poses])


def _visible_centroid(scene: GaussianScene, K: CameraIntrinsics) -> np.ndarray:
    """Alpha-weighted centroid of the scene as seen from the canonical view.

    Occlusion weights this toward near surfaces, which is the effective
    lever-arm depth at which yaw and lateral shift trade off.
    """
    probe = GaussianScene(scene.means, scene.rotations, scene.log_scales,
                          scene.opacity_logits, scene.means)
    out = rasterize(probe, Se3Pose.identity(), K, record_aux=False)
    weight = float(out.alpha.data.sum())
    if weight < 1e-9:
        return scene.means.mean(axis=0)
    return out.map.data.reshape(-1, 3).sum(axis=0) / weight


def _thread_count() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _frame_pass(scene, pose, K, target_m, retained, n_ret, lam_s, n_opt, cfg, ssim_slice, want_grad):
    """Forward + loss (+ backward) for one frame; returns (mse, ssim_loss, pose_grad)."""
    out = rasterize(scene, pose, K, background=cfg.background, record_aux=want_grad)
    rendered = out.map.data
    diff = (rendered - target_m) * retained[:, :, None]
    denom = n_ret * rendered.shape[2]
    mse = float(np.sum(diff * diff) / denom)
    upstream = 2.0 * diff / denom

    sloss = 0.0
    if lam_s > 0:
        rm = rendered * retained[:, :, None]
        sloss, sgrad = ssim_loss_with_gradient(rm[:, :, ssim_slice], target_m[:, :, ssim_slice])
        upstream[:, :, ssim_slice] += (lam_s / n_opt) * sgrad * retained[:, :, None]
    if not want_grad:
        return mse, sloss, np.zeros(6)
    grad, _ = rasterize_backward(scene, pose, K, upstream, out.aux, background=cfg.background)
    return mse, sloss, grad


def optimize_window(scene: GaussianScene, targets, masks, K: CameraIntrinsics,
                    cfg: WindowConfig, init=None) -> WindowEstimate:
    """Jointly optimize the b - 1 non-canonical poses of one window.

    ``targets``/``masks`` are per-frame maps, index 0 being the canonical
    frame whose pose stays pinned at identity.  Returns the best poses seen
    under the final-weight objective, so the returned loss never exceeds the
    loss at initialization.
    """
    if not scene.frozen:
        raise ValueError("scene must be frozen before pose optimization")
    b = len(targets)
    if b < 2:
        raise ValueError("window needs at least 2 frames")
    if len(masks) != b:
        raise ValueError("targets and masks must have equal length")
    k = scene.payload_dim
    target_data = [as_map_data(t, channels=k) for t in targets]
    mask_data = [as_map_data(m, channels=1)[:, :, 0] for m in masks]
    for t, m in zip(target_data, mask_data):
        if t.shape[:2] != (K.height, K.width) or m.shape != (K.height, K.width):
            raise ValueError("target/mask dimensions do not match intrinsics")

    retained = [m >= cfg.mask_threshold for m in mask_data]
    n_ret = [int(np.count_nonzero(r)) for r in retained]
    if any(n == 0 for n in n_ret):
        raise ValueError("a frame mask retains no pixels")
    target_m = [t * r[:, :, None] for t, r in zip(target_data, retained)]

    if init is not None:
        if len(init) != b:
            raise ValueError("init must provide one pose per frame")
        poses = list(init)
        if np.linalg.norm(poses[0].translation) > 1e-9 or abs(poses[0].rotation[0]) < 1 - 1e-12:
            raise ValueError("init pose of the canonical frame must be identity")
        poses[0] = Se3Pose.identity()
    else:
        poses = [Se3Pose.identity() for _ in range(b)]

    n_opt = b - 1
    ssim_slice = slice(0, min(3, k)) if cfg.ssim_channels == "first3" else slice(0, k)
    opt = Adam({"rot": ((n_opt, 3), cfg.lr_rot), "trans": ((n_opt, 3), cfg.lr_trans)})
    workers = _thread_count()
    centroid = _visible_centroid(scene, K)  # pivot for the rotation chart

    def evaluate(current, want_grads):
        mses = np.zeros(n_opt)
        slosses = np.zeros(n_opt)
        grads = np.zeros((n_opt, 6))
        jobs = [
            (scene, current[i + 1], K, target_m[i + 1], retained[i + 1], n_ret[i + 1],
             cfg.lambda_s, n_opt, cfg, ssim_slice, want_grads)
            for i in range(n_opt)
        ]
        if workers > 1 and n_opt > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(lambda a: _frame_pass(*a), jobs))
        else:
            results = [_frame_pass(*a) for a in jobs]
        for i, (mse, sloss, grad) in enumerate(results):
            mses[i] = mse
            slosses[i] = sloss
            grads[i] = grad
        centers = camera_centers(current)
        smooth_raw, smooth_grad = (0.0, np.zeros((b, 3)))
        if b >= 3:
            smooth_raw, smooth_grad = smoothness_loss_with_gradient(centers, 1.0)
        return mses, slosses, grads, smooth_raw, smooth_grad

    def final_objective(mses, slosses, smooth_raw):
        return float(mses.sum() + cfg.lambda_s * slosses.mean() + cfg.lambda_c_max * smooth_raw)

    best_poses = list(poses)
    best_loss = np.inf
    history = {"objective": [], "mse": []}

    for it in range(cfg.iters + 1):
        lam_c = cfg.lambda_c_max * (it / max(cfg.iters - 1, 1)) if cfg.iters > 1 else cfg.lambda_c_max
        lam_c = min(lam_c, cfg.lambda_c_max)
        mses, slosses, grads, smooth_raw, smooth_grad = evaluate(poses, it < cfg.iters)
        obj_final = final_objective(mses, slosses, smooth_raw)
        history["objective"].append(obj_final)
        history["mse"].append(float(mses.sum()))
        if obj_final < best_loss:
            best_loss = obj_final
            best_poses = list(poses)
        if it == cfg.iters:
            break

        rot_g = grads[:, :3].copy()
        trans_g = grads[:, 3:].copy()
        if lam_c > 0 and b >= 3:
            for i in range(1, b):
                R = poses[i].rotation_matrix()
                trans_g[i - 1] += -lam_c * (R @ smooth_grad[i])
        # camera-centered gradients -> centroid-pivoted chart
        pivots = [apply(poses[i + 1], centroid) for i in range(n_opt)]
        for i in range(n_opt):
            rot_g[i] -= np.cross(pivots[i], trans_g[i])
        upd = opt.step({"rot": rot_g, "trans": trans_g},
                       lr_scale=exponential_decay(it, cfg.iters, cfg.lr_decay))
        new_poses = [poses[0]]
        for i in range(n_opt):
            dtheta = upd["rot"][i]
            # pivoted step back to a camera-centered increment (exact)
            drho = upd["trans"][i] + (np.eye(3) - quat_to_matrix(quat_from_rotvec(dtheta))) @ pivots[i]
            new_poses.append(compose(se3_exp_increment(np.concatenate([dtheta, drho])), poses[i + 1]))
        poses = new_poses

    return WindowEstimate(
        canonical_index=0,
        relative_poses=[Se3Pose.identity()] + list(best_poses[1:]),
        history=history,
    )


def split_into_windows(n_frames: int, b: int):
    """Window frame ranges [(start, end), ...] with one-frame overlap.

    The last window is shorter than b when the sequence does not tile.
    """
    if n_frames < 1:
        raise ValueError("empty sequence")
    if n_frames == 1:
        raise ValueError("need at least 2 frames to estimate poses")
    spans = []
    c = 0
    while True:
        end = min(c + b, n_frames)
        spans.append((c, end))
        if end == n_frames:
            return spans
        c = end - 1


def relative_window_poses(trajectory: Trajectory, start: int, end: int):
    """Canonical-relative view poses T_j = inv(cam2world_j) o cam2world_start."""
    base = trajectory.poses[start]
    out = [compose(trajectory.poses[j].inverse(), base) for j in range(start, end)]
    out[0] = Se3Pose.identity()
    return out


def chain_windows(estimates, timestamps=None, initial_pose: Se3Pose | None = None) -> Trajectory:
    """Compose per-window relative poses into a global camera-to-world trajectory.

    Consecutive windows must overlap by exactly one frame; the shared frame
    is emitted once.  The first global pose is ``initial_pose`` (identity by
    default).
    """
    estimates = list(estimates)
    if not estimates:
        raise ValueError("no window estimates")
    g = initial_pose if initial_pose is not None else Se3Pose.identity()
    poses = []
    expected_start = estimates[0].canonical_index
    for n, est in enumerate(estimates):
        if est.canonical_index != expected_start:
            raise ValueError(
                f"window {n} starts at frame {est.canonical_index}, expected {expected_start} "
                "(consecutive windows must overlap by exactly one frame)"
            )
        rel = est.relative_poses
        start = 0 if n == 0 else 1  # overlap frame already emitted
        for j in range(start, len(rel)):
            poses.append(compose(g, rel[j].inverse()))
        g = compose(g, rel[-1].inverse())
        expected_start = est.canonical_index + len(rel) - 1
    if timestamps is None:
        timestamps = np.arange(len(poses), dtype=np.float64)
    if len(timestamps) != len(poses):
        raise ValueError(f"got {len(timestamps)} timestamps for {len(poses)} chained poses")
    return Trajectory(timestamps, poses)


def _erode_mask(mask: np.ndarray, threshold: float, radius: int) -> np.ndarray:
    """Shrink the retained region by `radius` px, including an image-border inset.

    Drops mover fringes around masked-out regions and the border strips where
    content slides in that the canonical frame never observed.
    """
    if radius <= 0:
        return mask
    from scipy.ndimage import binary_erosion

    retained = mask[:, :, 0] >= threshold
    eroded = binary_erosion(retained, iterations=radius, border_value=0)
    return np.where(eroded, mask[:, :, 0], 0.0)[:, :, None]


def _resample_payloads(points, target_map, K: CameraIntrinsics):
    """Nearest-pixel payloads for 3D points expressed in the canonical camera frame."""
    t = as_map_data(target_map)
    z = np.maximum(points[:, 2], 1e-9)
    u = np.clip(np.rint(K.fx * points[:, 0] / z + K.cx), 0, K.width - 1).astype(int)
    v = np.clip(np.rint(K.fy * points[:, 1] / z + K.cy), 0, K.height - 1).astype(int)
    return t[v, u, :]


def estimate_sequence(dataset: DatasetLayout, cfg: RunConfig,
                      init_trajectory: Trajectory | None = None,
                      progress=None) -> Trajectory:
    """Run the full pipeline over a dataset directory.

    Per window: lift the canonical frame's masked depth (or load an external
    point cloud), fit and freeze a scene, optimize the window poses, discard
    the scene, then chain all windows into one trajectory.
    """
    dataset.validate()
    K = dataset.intrinsics()
    timestamps = dataset.timestamps()
    n = len(timestamps)
    wcfg = WindowConfig.from_run_config(cfg)
    lift_cfg = LiftConfig(
        pixel_stride=cfg.pixel_stride,
        mask_threshold=cfg.mask_threshold,
        init_opacity=cfg.init_opacity,
        scale_knn=cfg.scale_knn,
    )

    if cfg.loss_space == "feature":
        if not dataset.has_feat():
            raise ValueError(
                "loss_space=feature requires a feat/ directory in the dataset"
            )
        feats = [PlanarMap(dataset.load("feat", i)) for i in range(n)]
        targets, _basis = pca_select_channels(feats, cfg.f)
    else:
        targets = [PlanarMap(dataset.load("rgb", i)) for i in range(n)]
    masks = [PlanarMap(dataset.load("mask", i)) for i in range(n)]

    if init_trajectory is not None and len(init_trajectory) != n:
        raise ValueError(
            f"initial trajectory has {len(init_trajectory)} poses, dataset has {n} frames"
        )

    estimates = []
    for widx, (start, end) in enumerate(split_into_windows(n, cfg.window_size)):
        canonical = start
        canon_mask = PlanarMap(_erode_mask(
            as_map_data(masks[canonical], channels=1), cfg.mask_threshold, cfg.mask_erosion
        ))
        if cfg.use_pointcloud:
            if not dataset.has_pointcloud():
                raise ValueError("use_pointcloud requires a pointcloud/ directory in the dataset")
            points, payloads = load_pointcloud(dataset._frame_path("pointcloud", canonical))
            if payloads.shape[1] != targets[canonical].channels:
                payloads = _resample_payloads(points, targets[canonical], K)
        else:
            depth = PlanarMap(dataset.load("depth", canonical))
            points, payloads = lift_depth(depth, canon_mask, K, targets[canonical], lift_cfg)
        scene = init_gaussians(points, payloads, lift_cfg)
        scene = fit_canonical(
            scene, targets[canonical], canon_mask, K,
            iters=cfg.fit_iters, lr=cfg.fit_lr,
            mask_threshold=cfg.mask_threshold, background=cfg.background,
        )
        init_poses = None
        if init_trajectory is not None:
            init_poses = relative_window_poses(init_trajectory, start, end)
        # regions dynamic at the canonical frame were never lifted or fit, so
        # they cannot supervise pose: intersect every frame mask with it
        canonical_mask = as_map_data(canon_mask, channels=1)
        window_masks = [
            PlanarMap(np.minimum(
                _erode_mask(as_map_data(masks[j], channels=1), cfg.mask_threshold, cfg.mask_erosion),
                canonical_mask,
            ))
            for j in range(start, end)
        ]
        est = optimize_window(
            scene, targets[start:end], window_masks, K, wcfg, init=init_poses
        )
        est = WindowEstimate(canonical_index=canonical,
                             relative_poses=est.relative_poses, history=est.history)
        estimates.append(est)
        if progress is not None:
            progress(widx, est)
        del scene  # per-segment scenes are discarded after optimization

    return chain_windows(estimates, timestamps=timestamps)
