"""On-disk formats: TUM trajectories, NPY tensors, run configuration, dataset layout.

Everything the pipeline reads or writes goes through this module so the
formats stay bit-exact and independently parseable:

* trajectories: TUM text lines ``timestamp tx ty tz qx qy qz qw`` (quaternion
  x,y,z,w on disk, camera-to-world);
* tensors: NPY version 1.0, little-endian, C-order, float32/float64/uint8;
* datasets: a directory of per-frame tensors plus intrinsics and timestamps;
* configuration: a strict JSON document with defaults for every field.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, Se3Pose, Trajectory

SUPPORTED_DTYPES = (np.float32, np.float64, np.uint8)


# ---------------------------------------------------------------------------
# TUM trajectories
# ---------------------------------------------------------------------------

def read_tum(path) -> Trajectory:
    timestamps, poses = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ValueError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            try:
                vals = [float(p) for p in parts]
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: non-numeric field ({exc})") from None
            ts, tx, ty, tz, qx, qy, qz, qw = vals
            norm = float(np.linalg.norm([qw, qx, qy, qz]))
            if abs(norm - 1.0) > 1e-3:
                raise ValueError(f"{path}:{lineno}: quaternion norm {norm:.6f} too far from 1")
            if abs(norm - 1.0) > 1e-6:
                warnings.warn(f"{path}:{lineno}: renormalizing quaternion (norm {norm:.9f})")
            timestamps.append(ts)
            poses.append(Se3Pose(np.array([qw, qx, qy, qz]), np.array([tx, ty, tz])))
    if not poses:
        raise ValueError(f"{path}: no trajectory lines found")
    return Trajectory(timestamps, poses)


def write_tum(path, trajectory: Trajectory) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# timestamp tx ty tz qx qy qz qw\n")
        for ts, pose in trajectory:
            w, x, y, z = pose.rotation
            tx, ty, tz = pose.translation
            fh.write(
                f"{ts:.9g} {tx:.9g} {ty:.9g} {tz:.9g} {x:.9g} {y:.9g} {z:.9g} {w:.9g}\n"
            )


# ---------------------------------------------------------------------------
# NPY tensors
# ---------------------------------------------------------------------------

def read_tensor(path) -> np.ndarray:
    """Strict NPY v1.0 reader: little-endian, C-order, float32/float64/uint8."""
    with open(path, "rb") as fh:
        try:
            version = np.lib.format.read_magic(fh)
        except ValueError as exc:
            raise ValueError(f"{path}: not an NPY file ({exc})") from None
        if version != (1, 0):
            raise ValueError(f"{path}: unsupported NPY version {version}; only 1.0 is accepted")
        shape, fortran_order, dtype = np.lib.format.read_array_header_1_0(fh)
        if fortran_order:
            raise ValueError(f"{path}: Fortran-order arrays are not supported")
        if dtype.byteorder == ">":
            raise ValueError(f"{path}: big-endian data is not supported")
        if dtype.type not in SUPPORTED_DTYPES:
            raise ValueError(f"{path}: unsupported dtype {dtype}; use float32/float64/uint8")
        count = int(np.prod(shape, dtype=np.int64))
        data = np.fromfile(fh, dtype=dtype, count=count)
        if data.size != count:
            raise ValueError(f"{path}: truncated file")
    return data.reshape(shape)


def write_tensor(path, array) -> None:
    array = np.asarray(array)
    if array.dtype.type not in SUPPORTED_DTYPES:
        raise ValueError(f"unsupported dtype {array.dtype}; use float32/float64/uint8")
    with open(path, "wb") as fh:
        np.lib.format.write_array(fh, np.ascontiguousarray(array), version=(1, 0))


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSettings:
    n_gaussians: int = 500
    width: int = 64
    height: int = 48
    payload_dim: int = 3
    trajectory: str = "jitter"
    max_rotation_deg: float = 0.2
    max_translation: float = 0.002  # fraction of mean scene depth, per frame
    n_frames: int = 30
    seed: int = 0
    dynamic_fraction: float = 0.0

    def __post_init__(self):
        if self.n_frames < 2:
            raise ValueError("synth.n_frames must be >= 2")
        if not 0.0 <= self.dynamic_fraction <= 1.0:
            raise ValueError("synth.dynamic_fraction must be in [0, 1]")
        if self.trajectory not in ("static", "constant_velocity", "arc", "jitter"):
            raise ValueError(f"synth.trajectory: unknown model '{self.trajectory}'")
        if self.n_gaussians < 1 or self.width < 1 or self.height < 1 or self.payload_dim < 1:
            raise ValueError("synth sizes must be positive")


@dataclass(frozen=True)
class RunConfig:
    window_size: int = 15        # frames per segment, first frame canonical
    iters: int = 400
    lr_rot: float = 3e-3
    lr_trans: float = 3e-3
    lr_decay: float = 0.003      # final lr factor of the exponential schedule
    lambda_s: float = 0.2        # SSIM weight
    lambda_c_max: float = 1.0    # smoothness ramp ceiling
    loss_space: str = "rgb"      # "rgb" or "feature"
    f: int = 16                  # feature channels kept by PCA
    fit_iters: int = 300
    fit_lr: float = 0.005
    pixel_stride: int = 2
    mask_threshold: float = 0.5
    init_opacity: float = 0.5
    scale_knn: int = 3
    background: float = 0.0
    ssim_channels: str = "average"   # "average" or "first3"
    use_pointcloud: bool = False     # init scenes from pointcloud/ instead of depth
    mask_erosion: int = 0            # px of erosion applied to thresholded masks
    synth: SynthSettings = field(default_factory=SynthSettings)

    def __post_init__(self):
        if self.window_size < 2:
            raise ValueError("window_size must be >= 2")
        if self.iters < 1 or self.fit_iters < 0:
            raise ValueError("iteration counts must be positive")
        if self.lr_rot <= 0 or self.lr_trans <= 0 or self.fit_lr <= 0:
            raise ValueError("learning rates must be positive")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must be in (0, 1]")
        if self.lambda_s < 0 or self.lambda_c_max < 0:
            raise ValueError("loss weights must be >= 0")
        if self.loss_space not in ("rgb", "feature"):
            raise ValueError(f"loss_space: unknown value '{self.loss_space}'")
        if self.f < 1:
            raise ValueError("f must be >= 1")
        if self.pixel_stride < 1:
            raise ValueError("pixel_stride must be >= 1")
        if not 0.0 <= self.mask_threshold <= 1.0:
            raise ValueError("mask_threshold must be in [0, 1]")
        if not 0.0 < self.init_opacity < 1.0:
            raise ValueError("init_opacity must be in (0, 1)")
        if self.scale_knn < 1:
            raise ValueError("scale_knn must be >= 1")
        if self.ssim_channels not in ("average", "first3"):
            raise ValueError(f"ssim_channels: unknown value '{self.ssim_channels}'")
        if self.mask_erosion < 0:
            raise ValueError("mask_erosion must be >= 0")


def _check_type(path: str, value, expected: str):
    if expected == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValueError(f"'{path}' must be an integer, got {value!r}")
        return value
    if expected == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"'{path}' must be a number, got {value!r}")
        return float(value)
    if expected == "str":
        if not isinstance(value, str):
            raise ValueError(f"'{path}' must be a string, got {value!r}")
        return value
    if expected == "bool":
        if not isinstance(value, bool):
            raise ValueError(f"'{path}' must be a boolean, got {value!r}")
        return value
    raise ValueError(f"'{path}' has unsupported type")


def _build_dataclass(cls, doc: dict, prefix: str):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in doc.items():
        path = f"{prefix}{key}"
        if key not in known:
            raise ValueError(f"unknown configuration key '{path}'")
        if key == "synth":
            if not isinstance(value, dict):
                raise ValueError(f"'{path}' must be an object")
            kwargs[key] = _build_dataclass(SynthSettings, value, prefix="synth.")
            continue
        kwargs[key] = _check_type(path, value, known[key].type)
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ValueError(f"{prefix.rstrip('.')}: {exc}" if prefix else str(exc)) from None


def load_config(path) -> RunConfig:
    """Parse and validate a JSON run configuration; unknown keys are rejected."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: top-level configuration must be an object")
    return config_from_dict(doc)


def config_from_dict(doc: dict) -> RunConfig:
    return _build_dataclass(RunConfig, doc, prefix="")


# ---------------------------------------------------------------------------
# Dataset layout
# ---------------------------------------------------------------------------

@dataclass
class DatasetLayout:
    """Directory of per-frame tensors: rgb/, depth/, mask/, optional feat/ and
    pointcloud/, plus intrinsics.json and timestamps.txt."""

    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    def _frame_path(self, kind: str, index: int) -> Path:
        return self.root / kind / f"{index:06d}.npy"

    @property
    def intrinsics_path(self) -> Path:
        return self.root / "intrinsics.json"

    def intrinsics(self) -> CameraIntrinsics:
        with open(self.intrinsics_path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        try:
            return CameraIntrinsics(
                fx=float(doc["fx"]), fy=float(doc["fy"]),
                cx=float(doc["cx"]), cy=float(doc["cy"]),
                width=int(doc["width"]), height=int(doc["height"]),
            )
        except KeyError as exc:
            raise ValueError(f"{self.intrinsics_path}: missing key {exc}") from None

    def timestamps(self) -> np.ndarray:
        path = self.root / "timestamps.txt"
        with open(path, "r", encoding="utf-8") as fh:
            values = [float(line.strip()) for line in fh if line.strip()]
        if not values:
            raise ValueError(f"{path}: empty timestamps file")
        return np.asarray(values, dtype=np.float64)

    def frame_count(self) -> int:
        return len(self.timestamps())

    def has_feat(self) -> bool:
        return (self.root / "feat").is_dir()

    def has_pointcloud(self) -> bool:
        return (self.root / "pointcloud").is_dir()

    def load(self, kind: str, index: int) -> np.ndarray:
        path = self._frame_path(kind, index)
        if not path.is_file():
            raise FileNotFoundError(f"missing frame tensor {path}")
        return read_tensor(path)

    def validate(self) -> None:
        """Reject missing files and dimension mismatches before computation."""
        K = self.intrinsics()
        n = self.frame_count()
        kinds = ["rgb", "depth", "mask"] + (["feat"] if self.has_feat() else [])
        for kind in kinds:
            d = self.root / kind
            if not d.is_dir():
                raise ValueError(f"dataset is missing the {kind}/ directory")
        for i in range(n):
            for kind in kinds:
                arr = self.load(kind, i)
                if arr.shape[:2] != (K.height, K.width):
                    raise ValueError(
                        f"{self._frame_path(kind, i)}: shape {arr.shape} does not match "
                        f"intrinsics {K.height}x{K.width}"
                    )
                if kind == "rgb" and (arr.ndim != 3 or arr.shape[2] != 3):
                    raise ValueError(f"{self._frame_path(kind, i)}: rgb frames must be HxWx3")
                if kind in ("depth", "mask") and arr.ndim != 2:
                    raise ValueError(f"{self._frame_path(kind, i)}: {kind} frames must be HxW")
