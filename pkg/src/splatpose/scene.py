"""Explicit scene representation (3D Gaussians) and planar raster maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import normalize_quat


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True)
class Gaussian3D:
    """One anisotropic Gaussian: mean, orientation, per-axis log std-dev,
    pre-sigmoid opacity and a k-channel payload (color or feature vector)."""

    mean: np.ndarray
    rot: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    payload: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        rot = normalize_quat(self.rot)
        log_scale = np.asarray(self.log_scale, dtype=np.float64)
        payload = np.asarray(self.payload, dtype=np.float64)
        if mean.shape != (3,) or log_scale.shape != (3,):
            raise ValueError("mean and log_scale must be 3-vectors")
        if payload.ndim != 1 or payload.size < 1:
            raise ValueError("payload must be a non-empty vector")
        for a in (mean, log_scale, payload):
            if not np.all(np.isfinite(a)):
                raise ValueError("non-finite Gaussian parameter")
        if not np.isfinite(self.opacity_logit):
            raise ValueError("non-finite opacity logit")
        for name, a in (("mean", mean), ("rot", rot), ("log_scale", log_scale), ("payload", payload)):
            a = a.copy()
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))


class GaussianScene:
    """Ordered collection of Gaussians stored as packed arrays.

    All arrays are read-only; ``frozen`` marks scenes whose parameters must
    not change anymore (the pose optimizer requires frozen scenes, the scene
    fitter refuses them).
    """

    def __init__(self, means, rotations, log_scales, opacity_logits, payloads, frozen=False):
        means = np.ascontiguousarray(means, dtype=np.float64)
        rotations = np.ascontiguousarray(rotations, dtype=np.float64)
        log_scales = np.ascontiguousarray(log_scales, dtype=np.float64)
        opacity_logits = np.ascontiguousarray(opacity_logits, dtype=np.float64)
        payloads = np.ascontiguousarray(payloads, dtype=np.float64)
        n = means.shape[0]
        if means.shape != (n, 3) or log_scales.shape != (n, 3):
            raise ValueError("means and log_scales must be (n, 3)")
        if rotations.shape != (n, 4):
            raise ValueError("rotations must be (n, 4)")
        if opacity_logits.shape != (n,):
            raise ValueError("opacity_logits must be (n,)")
        if payloads.ndim != 2 or payloads.shape[0] != n or payloads.shape[1] < 1:
            raise ValueError("payloads must be (n, k) with k >= 1")
        for a in (means, rotations, log_scales, opacity_logits, payloads):
            if not np.all(np.isfinite(a)):
                raise ValueError("non-finite scene parameter")
        norms = np.linalg.norm(rotations, axis=1)
        if np.any(norms < 1e-12):
            raise ValueError("zero quaternion in scene")
        rotations = rotations / norms[:, None]
        flip = rotations[:, 0] < 0
        rotations[flip] = -rotations[flip]
        for a in (means, rotations, log_scales, opacity_logits, payloads):
            a.setflags(write=False)
        self.means = means
        self.rotations = rotations
        self.log_scales = log_scales
        self.opacity_logits = opacity_logits
        self.payloads = payloads
        self.frozen = bool(frozen)

    @staticmethod
    def from_gaussians(gaussians, frozen=False) -> "GaussianScene":
        gaussians = list(gaussians)
        if not gaussians:
            raise ValueError("empty scene")
        k = gaussians[0].payload.size
        if any(g.payload.size != k for g in gaussians):
            raise ValueError("inconsistent payload dimensions")
        return GaussianScene(
            np.array([g.mean for g in gaussians]),
            np.array([g.rot for g in gaussians]),
            np.array([g.log_scale for g in gaussians]),
            np.array([g.opacity_logit for g in gaussians]),
            np.array([g.payload for g in gaussians]),
            frozen=frozen,
        )

    def __len__(self):
        return self.means.shape[0]

    def __getitem__(self, i) -> Gaussian3D:
        return Gaussian3D(
            self.means[i],
            self.rotations[i],
            self.log_scales[i],
            float(self.opacity_logits[i]),
            self.payloads[i],
        )

    @property
    def payload_dim(self) -> int:
        return self.payloads.shape[1]

    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def freeze(self) -> "GaussianScene":
        if self.frozen:
            return self
        return GaussianScene(
            self.means, self.rotations, self.log_scales, self.opacity_logits, self.payloads, frozen=True
        )

    def replace(self, **arrays) -> "GaussianScene":
        """New unfrozen scene with some parameter arrays swapped out."""
        kw = dict(
            means=self.means,
            rotations=self.rotations,
            log_scales=self.log_scales,
            opacity_logits=self.opacity_logits,
            payloads=self.payloads,
        )
        kw.update(arrays)
        return GaussianScene(**kw)


class PlanarMap:
    """H x W x k raster of reals: image, feature map, depth map, mask or render."""

    def __init__(self, data):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"map data must be HxW or HxWxC, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("non-finite map values")
        data = np.ascontiguousarray(data)
        data.setflags(write=False)
        self.data = data

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def channel(self, i) -> np.ndarray:
        return self.data[:, :, i]


def as_map_data(m, channels=None) -> np.ndarray:
    """Accept a PlanarMap or array, return (H, W, C) float64 data."""
    data = m.data if isinstance(m, PlanarMap) else np.asarray(m, dtype=np.float64)
    if data.ndim == 2:
        data = data[:, :, None]
    if data.ndim != 3:
        raise ValueError(f"expected HxW or HxWxC map, got shape {data.shape}")
    if channels is not None and data.shape[2] != channels:
        raise ValueError(f"expected {channels} channels, got {data.shape[2]}")
    return data
