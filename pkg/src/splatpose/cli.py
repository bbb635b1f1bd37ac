"""Command-line driver: synth, estimate, eval, plot and render subcommands.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Progress and per-window losses are logged as line-delimited JSON on stderr
so experiment harnesses can scrape them.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .evaluation import evaluate_trajectories
from .geometry import Se3Pose, Trajectory
from .interchange import DatasetLayout, RunConfig, load_config, read_tum, write_tensor, write_tum
from .scene import PlanarMap
from .scene_init import LiftConfig, fit_canonical, init_gaussians, lift_depth
from .synth import generate
from .window import estimate_sequence, split_into_windows
from .rasterizer import rasterize


def _log_json(**kv):
    print(json.dumps(kv), file=sys.stderr, flush=True)


def _load_run_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    return load_config(path)


def _cmd_synth(args) -> int:
    cfg = _load_run_config(args.config)
    layout = generate(cfg.synth, args.out)
    n = layout.frame_count()
    K = layout.intrinsics()
    print(f"wrote {n} frames ({K.width}x{K.height}, payload dim {cfg.synth.payload_dim}, "
          f"trajectory '{cfg.synth.trajectory}') to {args.out}")
    return 0


def _cmd_estimate(args) -> int:
    cfg = _load_run_config(args.config)
    dataset = DatasetLayout(args.data)
    init = read_tum(args.init) if args.init else None

    def progress(widx, est):
        hist = est.history or {}
        obj = hist.get("objective", [])
        _log_json(
            window=widx,
            canonical=est.canonical_index,
            frames=len(est.relative_poses),
            initial_objective=obj[0] if obj else None,
            final_objective=min(obj) if obj else None,
        )

    trajectory = estimate_sequence(dataset, cfg, init_trajectory=init, progress=progress)
    write_tum(args.out, trajectory)
    print(f"wrote {len(trajectory)} poses to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    est = read_tum(args.est)
    gt = read_tum(args.gt)
    report = evaluate_trajectories(est, gt, with_scale=not args.no_scale)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=2)
            fh.write("\n")
    print(f"{'metric':<10}{'value':>14}")
    print(f"{'ATE':<10}{report.ate_rmse:>14.6f}")
    print(f"{'RPE_r':<10}{report.rpe_rot:>14.6f}")
    print(f"{'RPE_t':<10}{report.rpe_trans:>14.6f}")
    print(f"{'dv':<10}{report.delta_v:>14.6f}")
    print(f"{'frames':<10}{report.n_frames:>14d}")
    return 0


def _cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .evaluation import associate

    est = read_tum(args.est)
    gt = read_tum(args.gt)
    pairs = associate(est, gt)
    if not pairs:
        raise ValueError("no timestamp associations between the trajectories")
    t = est.timestamps[[p[0] for p in pairs]]
    pe = est.positions()[[p[0] for p in pairs]]
    pg = gt.positions()[[p[1] for p in pairs]]

    base = Path(args.out)
    if base.suffix in (".svg", ".csv"):
        base = base.with_suffix("")
    csv_path = base.with_suffix(".csv")
    svg_path = base.with_suffix(".svg")

    header = "time,gt_x,gt_y,gt_z,est_x,est_y,est_z"
    rows = np.column_stack([t, pg, pe])
    np.savetxt(csv_path, rows, delimiter=",", header=header, comments="")

    fig, axes = plt.subplots(1, 2, figsize=(11, 4.5))
    axes[0].plot(pg[:, 0], pg[:, 2], "-", label="ground truth")
    axes[0].plot(pe[:, 0], pe[:, 2], "--", label="estimate")
    axes[0].set_xlabel("x")
    axes[0].set_ylabel("z")
    axes[0].set_title("top-down")
    axes[0].legend()
    axes[0].axis("equal")
    for i, name in enumerate("xyz"):
        axes[1].plot(t, pg[:, i], "-", label=f"gt {name}")
        axes[1].plot(t, pe[:, i], "--", label=f"est {name}")
    axes[1].set_xlabel("time [s]")
    axes[1].set_ylabel("position")
    axes[1].set_title("per-axis position")
    axes[1].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(svg_path)
    plt.close(fig)
    print(f"wrote {svg_path} and {csv_path}")
    return 0


def _parse_pose_argument(text: str) -> Se3Pose:
    if text.strip() == "identity":
        return Se3Pose.identity()
    parts = text.split()
    if len(parts) != 8:
        raise ValueError(
            f"pose must be 'identity' or a TUM line with 8 fields, got {len(parts)} fields"
        )
    try:
        ts, tx, ty, tz, qx, qy, qz, qw = (float(p) for p in parts)
    except ValueError:
        raise ValueError(f"non-numeric value in pose line: {text!r}") from None
    return Se3Pose(np.array([qw, qx, qy, qz]), np.array([tx, ty, tz]))


def _cmd_render(args) -> int:
    cfg = _load_run_config(args.config)
    dataset = DatasetLayout(args.data)
    dataset.validate()
    K = dataset.intrinsics()
    n = dataset.frame_count()
    if not 0 <= args.frame < n:
        raise ValueError(f"frame {args.frame} out of range (dataset has {n} frames)")
    pose = _parse_pose_argument(args.pose)

    # canonical frame of the window containing the requested frame
    canonical = 0
    for start, end in split_into_windows(n, cfg.window_size):
        if start <= args.frame < end:
            canonical = start
            break
    lift_cfg = LiftConfig(pixel_stride=cfg.pixel_stride, mask_threshold=cfg.mask_threshold,
                          init_opacity=cfg.init_opacity, scale_knn=cfg.scale_knn)
    rgb = PlanarMap(dataset.load("rgb", canonical))
    mask = PlanarMap(dataset.load("mask", canonical))
    depth = PlanarMap(dataset.load("depth", canonical))
    points, payloads = lift_depth(depth, mask, K, rgb, lift_cfg)
    scene = init_gaussians(points, payloads, lift_cfg)
    scene = fit_canonical(scene, rgb, mask, K, iters=cfg.fit_iters, lr=cfg.fit_lr,
                          mask_threshold=cfg.mask_threshold, background=cfg.background)
    out = rasterize(scene, pose, K, background=cfg.background, record_aux=False)
    write_tensor(args.out, out.map.data.astype(np.float32))
    print(f"rendered canonical window {canonical} at the requested pose -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splatpose",
        description="Small-baseline camera pose estimation with frozen Gaussian-splat scenes",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config", default=None, help="JSON run configuration")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("estimate", help="estimate a trajectory from a dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config", default=None, help="JSON run configuration")
    p.add_argument("--out", required=True, help="output TUM trajectory file")
    p.add_argument("--init", default=None, help="initial trajectory (refinement mode)")
    p.set_defaults(func=_cmd_estimate)

    p = sub.add_parser("eval", help="compare an estimated trajectory to ground truth")
    p.add_argument("--est", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--no-scale", action="store_true", help="rigid alignment instead of similarity")
    p.add_argument("--report", default=None, help="write metrics JSON here")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("plot", help="plot two trajectories as SVG + CSV")
    p.add_argument("--est", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True, help="output base path (.svg/.csv are derived)")
    p.set_defaults(func=_cmd_plot)

    p = sub.add_parser("render", help="fit a canonical scene and render it at a pose")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--frame", type=int, required=True)
    p.add_argument("--pose", default="identity", help="'identity' or a TUM pose line")
    p.add_argument("--out", required=True, help="output .npy tensor")
    p.set_defaults(func=_cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, OSError) as exc:
        config_error = isinstance(exc, ValueError) and (
            "configuration" in str(exc) or "pose must be" in str(exc) or "non-numeric value in pose" in str(exc)
        )
        print(f"error: {exc}", file=sys.stderr)
        return 2 if config_error else 1


if __name__ == "__main__":
    sys.exit(main())
