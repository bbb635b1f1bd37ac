"""Synthetic ground-truth generator.

Builds a random Gaussian scene inside the camera frustum, moves a camera
along a configurable small-baseline trajectory, renders every frame and
writes a complete dataset directory (rgb/depth/mask/feat/pointcloud +
intrinsics + timestamps) plus the ground-truth TUM trajectory.  Depth maps
are the alpha-weighted mean blended Gaussian depth per pixel; masks are 1
where static Gaussians dominate and 0 where dynamic ones contribute more
than half of the accumulated alpha.

Deterministic for a fixed seed, byte for byte.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, Se3Pose, Trajectory, compose, quat_from_rotvec
from .interchange import DatasetLayout, SynthSettings, write_tensor, write_tum
from .rasterizer import rasterize
from .scene import GaussianScene

# depth scale used to convert the per-frame translation cap (a fraction)
# into scene units: the midpoint of the 2..10 sampling frustum
NOMINAL_DEPTH = 6.0
FRUSTUM_NEAR = 2.0
FRUSTUM_FAR = 10.0
FPS = 30.0


def default_intrinsics(width: int, height: int) -> CameraIntrinsics:
    return CameraIntrinsics(
        fx=float(width), fy=float(width),
        cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
        width=width, height=height,
    )


def _sample_scene(cfg: SynthSettings, K: CameraIntrinsics, rng) -> GaussianScene:
    """Textured undulating surface filling the view, like a wall or desk scene.

    A smooth random height field keeps one depth per viewing ray, so the
    blended depth maps written by `generate` stay close to the true surface.
    """
    n = cfg.n_gaussians
    u = rng.uniform(0.02 * K.width, 0.98 * K.width, n)
    v = rng.uniform(0.02 * K.height, 0.98 * K.height, n)
    # deep folds give the parallax diversity pose estimation needs while
    # keeping roughly one depth per ray for consistent depth maps
    amp = rng.uniform(0.8, 1.3, 2)
    freq = rng.uniform(0.8, 1.8, 2)
    phase = rng.uniform(0, 2 * np.pi, 2)
    z = (
        0.85 * NOMINAL_DEPTH
        + amp[0] * np.sin(2 * np.pi * freq[0] * u / K.width + phase[0])
        + amp[1] * np.sin(2 * np.pi * freq[1] * v / K.height + phase[1])
        + rng.normal(0.0, 0.05, n)
    )
    means = np.column_stack([(u - K.cx) * z / K.fx, (v - K.cy) * z / K.fy, z])
    rot = rng.normal(size=(n, 4))
    sigma_px = rng.uniform(1.5, 4.0, n)  # footprint in pixels at each depth
    sigma = sigma_px * z / K.fx
    log_scales = np.log(sigma)[:, None] + rng.uniform(-0.3, 0.3, (n, 3))
    logits = rng.uniform(0.0, 2.0, n)
    payloads = rng.uniform(0.0, 1.0, (n, cfg.payload_dim))
    return GaussianScene(means, rot, log_scales, logits, payloads)


def _trajectory_poses(cfg: SynthSettings, rng) -> list:
    """Camera-to-world poses per frame, frame 0 at identity."""
    n = cfg.n_frames
    step = cfg.max_translation * NOMINAL_DEPTH
    rate = np.radians(cfg.max_rotation_deg)
    poses = [Se3Pose.identity()]
    if cfg.trajectory == "static":
        poses = [Se3Pose.identity() for _ in range(n)]
    elif cfg.trajectory == "constant_velocity":
        for t in range(1, n):
            poses.append(Se3Pose(
                quat_from_rotvec(np.array([0.0, rate * t, 0.0])),
                np.array([0.0, 0.0, step * t]),
            ))
    elif cfg.trajectory == "arc":
        # circular sweep in the xz-plane, per-frame arc length = step
        omega = max(rate, 1e-6)
        radius = step / omega
        for t in range(1, n):
            a = omega * t
            poses.append(Se3Pose(
                quat_from_rotvec(np.array([0.0, a, 0.0])),
                np.array([radius * (1.0 - np.cos(a)), 0.0, radius * np.sin(a)]),
            ))
    elif cfg.trajectory == "jitter":
        # smooth drift plus bounded uniform noise; the split keeps per-frame
        # motion within the caps (drift + worst-case noise swing <= 1)
        noise_t = rng.uniform(-0.08 * step, 0.08 * step, (n, 3))
        noise_r = rng.uniform(-0.08 * rate, 0.08 * rate, (n, 3))
        noise_t[0] = 0.0
        noise_r[0] = 0.0
        for t in range(1, n):
            trans = np.array([0.0, 0.0, 0.7 * step * t]) + noise_t[t]
            rotv = np.array([0.0, 0.3 * rate * t, 0.0]) + noise_r[t]
            poses.append(Se3Pose(quat_from_rotvec(rotv), trans))
    else:
        raise ValueError(f"unknown trajectory model '{cfg.trajectory}'")
    return poses


def _dynamic_clusters(scene: GaussianScene, n_dyn: int, rng) -> np.ndarray:
    """Pick the dynamic subset as a few spatially coherent blobs, like objects."""
    if n_dyn == 0:
        return np.array([], dtype=np.int64)
    n_clusters = max(1, min(3, n_dyn // 20))
    seeds = rng.choice(len(scene), size=n_clusters, replace=False)
    per = n_dyn // n_clusters
    chosen: list[int] = []
    taken = np.zeros(len(scene), dtype=bool)
    for ci, seed in enumerate(seeds):
        want = per if ci < n_clusters - 1 else n_dyn - len(chosen)
        d = np.linalg.norm(scene.means - scene.means[seed], axis=1)
        d[taken] = np.inf
        near = np.argsort(d, kind="stable")[:want]
        chosen.extend(near.tolist())
        taken[near] = True
    return np.sort(np.array(chosen, dtype=np.int64))


def _dynamic_offsets(cfg: SynthSettings, n_dynamic: int, rng) -> np.ndarray:
    """(n_frames, n_dynamic, 3) smooth random-walk displacements, zero at frame 0.

    All movers share one walk per generation so each blob drifts rigidly.
    """
    out = np.zeros((cfg.n_frames, n_dynamic, 3))
    if n_dynamic == 0:
        return out
    vel = np.zeros(3)
    step = 0.005 * NOMINAL_DEPTH
    for t in range(1, cfg.n_frames):
        vel = 0.8 * vel + rng.uniform(-0.5 * step, 0.5 * step, 3)
        norm = float(np.linalg.norm(vel))
        if norm > step:
            vel = vel * (step / norm)
        out[t] = out[t - 1] + vel
    return out


def generate(cfg: SynthSettings, out_dir) -> DatasetLayout:
    """Write a full dataset under out_dir and return its layout handle."""
    out_dir = Path(out_dir)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    K = default_intrinsics(cfg.width, cfg.height)
    scene = _sample_scene(cfg, K, rng)
    poses = _trajectory_poses(cfg, rng)

    n_dyn = int(round(cfg.dynamic_fraction * len(scene)))
    dyn_idx = _dynamic_clusters(scene, n_dyn, rng)
    dyn_mask = np.zeros(len(scene))
    dyn_mask[dyn_idx] = 1.0
    if n_dyn:
        # near-opaque, tight movers floated in front of the static surface:
        # they occlude rather than blend, so the dynamic-coverage indicator
        # saturates and its soft fringe stays narrow around each blob
        logits = scene.opacity_logits.copy()
        logits[dyn_idx] = 4.0
        means = scene.means.copy()
        means[dyn_idx, 2] -= 0.15 * NOMINAL_DEPTH
        log_scales = scene.log_scales.copy()
        tight = np.log(1.6 * means[dyn_idx, 2] / K.fx)
        log_scales[dyn_idx] = np.minimum(log_scales[dyn_idx], tight[:, None])
        scene = scene.replace(opacity_logits=logits, means=means, log_scales=log_scales)
    offsets = _dynamic_offsets(cfg, n_dyn, rng)

    k = cfg.payload_dim
    dirs = ["rgb", "depth", "mask"] + (["feat"] if k > 3 else []) + ["pointcloud"]
    for d in dirs:
        (out_dir / d).mkdir(parents=True, exist_ok=True)

    for t, pose in enumerate(poses):
        means = scene.means.copy()
        if n_dyn:
            means[dyn_idx] += offsets[t]
        view = pose.inverse()
        cam_z = means @ view.rotation_matrix().T[:, 2] + view.translation[2]
        # two bookkeeping channels ride along in the payload: camera depth and
        # a dynamic indicator, both alpha-blended exactly like the colors
        aug = np.column_stack([scene.payloads, cam_z, dyn_mask])
        frame_scene = GaussianScene(
            means, scene.rotations, scene.log_scales, scene.opacity_logits, aug
        )
        out = rasterize(frame_scene, view, K, background=0.0, record_aux=False)
        data = out.map.data
        alpha = out.alpha.data[:, :, 0]
        safe = np.maximum(alpha, 1e-12)
        payload = data[:, :, :k]
        depth = np.where(alpha > 1e-6, data[:, :, k] / safe, 0.0)
        dyn_frac = np.where(alpha > 1e-6, data[:, :, k + 1] / safe, 0.0)
        mask = (dyn_frac <= 0.5).astype(np.float32)

        write_tensor(out_dir / "rgb" / f"{t:06d}.npy",
                     np.clip(payload[:, :, :3], 0.0, 1.0).astype(np.float32))
        if k > 3:
            write_tensor(out_dir / "feat" / f"{t:06d}.npy", payload.astype(np.float32))
        write_tensor(out_dir / "depth" / f"{t:06d}.npy", depth.astype(np.float32))
        write_tensor(out_dir / "mask" / f"{t:06d}.npy", mask)

        static = np.ones(len(scene), dtype=bool)
        static[dyn_idx] = False
        pts_cam = means[static] @ view.rotation_matrix().T + view.translation
        cloud = np.column_stack([pts_cam, scene.payloads[static]]).astype(np.float32)
        write_tensor(out_dir / "pointcloud" / f"{t:06d}.npy", cloud)

    with open(out_dir / "intrinsics.json", "w", encoding="utf-8") as fh:
        json.dump(
            {"fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy,
             "width": K.width, "height": K.height},
            fh, indent=2,
        )
        fh.write("\n")
    timestamps = np.arange(cfg.n_frames) / FPS
    with open(out_dir / "timestamps.txt", "w", encoding="utf-8") as fh:
        for ts in timestamps:
            fh.write(f"{ts:.9g}\n")
    write_tum(out_dir / "groundtruth.txt", Trajectory(timestamps, poses))
    return DatasetLayout(out_dir)
