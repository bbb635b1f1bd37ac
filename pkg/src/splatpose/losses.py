"""Rendering losses and their gradients with respect to the rendered map.

The pose optimizer combines three terms: masked MSE, an SSIM quality term
(1 - ssim)/2, and a second-difference smoothness penalty on camera centers.
Each loss here comes with an analytic gradient so the optimizer needs one
rasterizer backward call per frame and nothing else.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .scene import as_map_data

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = (0.01 * 1.0) ** 2  # dynamic range L = 1.0
SSIM_C2 = (0.03 * 1.0) ** 2


def masked_mse(rendered, target, mask, threshold: float = 0.5) -> float:
    """Mean squared difference over pixels whose mask value is >= threshold."""
    loss, _ = masked_mse_with_gradient(rendered, target, mask, threshold)
    return loss


def masked_mse_with_gradient(rendered, target, mask, threshold: float = 0.5):
    r = as_map_data(rendered)
    t = as_map_data(target)
    m = as_map_data(mask)
    if r.shape != t.shape:
        raise ValueError(f"rendered/target shape mismatch: {r.shape} vs {t.shape}")
    if m.shape[:2] != r.shape[:2] or m.shape[2] != 1:
        raise ValueError("mask must be a 1-channel map matching the image size")
    retained = m[:, :, 0] >= threshold
    n = int(np.count_nonzero(retained))
    if n == 0:
        raise ValueError("empty mask: no retained pixels")
    diff = (r - t) * retained[:, :, None]
    denom = n * r.shape[2]
    loss = float(np.sum(diff * diff) / denom)
    return loss, 2.0 * diff / denom


def _gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(x**2) / (2.0 * sigma**2))
    return w / w.sum()


def _filter_valid(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    y = sliding_window_view(x, w.size, axis=0) @ w
    return sliding_window_view(y, w.size, axis=1) @ w


def _filter_adjoint(y: np.ndarray, w: np.ndarray) -> np.ndarray:
    # adjoint of valid-mode correlation with a symmetric kernel
    p = w.size - 1
    return _filter_valid(np.pad(y, ((p, p), (p, p))), w)


def ssim(a, b) -> float:
    """Mean SSIM over valid 11x11 windows, averaged across channels, in [-1, 1]."""
    value, _ = ssim_with_gradient(a, b)
    return value


def ssim_with_gradient(a, b):
    """Returns (mean SSIM, d(mean SSIM)/d(a)) with the standard Gaussian window."""
    a = as_map_data(a)
    b = as_map_data(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"images smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    w = _gaussian_kernel()
    channels = a.shape[2]
    total = 0.0
    grad = np.zeros_like(a)
    n_valid = (a.shape[0] - SSIM_WINDOW + 1) * (a.shape[1] - SSIM_WINDOW + 1)
    for c in range(channels):
        x, y = a[:, :, c], b[:, :, c]
        mu_x = _filter_valid(x, w)
        mu_y = _filter_valid(y, w)
        sxx = _filter_valid(x * x, w) - mu_x**2
        syy = _filter_valid(y * y, w) - mu_y**2
        sxy = _filter_valid(x * y, w) - mu_x * mu_y
        n1 = 2.0 * mu_x * mu_y + SSIM_C1
        n2 = 2.0 * sxy + SSIM_C2
        d1 = mu_x**2 + mu_y**2 + SSIM_C1
        d2 = sxx + syy + SSIM_C2
        s = (n1 * n2) / (d1 * d2)
        total += float(np.mean(s))

        ds_dmu = 2.0 * (mu_y * n2 * d1 - n1 * n2 * mu_x) / (d1**2 * d2)
        ds_dsxx = -(n1 * n2) / (d1 * d2**2)
        ds_dsxy = 2.0 * n1 / (d1 * d2)
        direct = ds_dmu - 2.0 * mu_x * ds_dsxx - mu_y * ds_dsxy
        g = _filter_adjoint(direct, w) + 2.0 * x * _filter_adjoint(ds_dsxx, w) \
            + y * _filter_adjoint(ds_dsxy, w)
        grad[:, :, c] = g / n_valid
    return total / channels, grad / channels


def ssim_loss_with_gradient(a, b):
    """(1 - ssim)/2 and its gradient with respect to a."""
    value, grad = ssim_with_gradient(a, b)
    return 0.5 * (1.0 - value), -0.5 * grad


def smoothness_loss(positions, lambda_c: float) -> float:
    loss, _ = smoothness_loss_with_gradient(positions, lambda_c)
    return loss


def smoothness_loss_with_gradient(positions, lambda_c: float):
    """Sum of second-difference norms of camera positions, weighted by lambda_c.

    Gradient is the subgradient choice 0 where a second difference vanishes.
    """
    x = np.asarray(positions, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3:
        raise ValueError("positions must be (n, 3)")
    if x.shape[0] < 3:
        raise ValueError("need at least 3 positions for second differences")
    second = x[2:] - 2.0 * x[1:-1] + x[:-2]
    norms = np.linalg.norm(second, axis=1)
    loss = float(lambda_c * norms.sum())
    grad = np.zeros_like(x)
    nonzero = norms > 0
    unit = np.zeros_like(second)
    unit[nonzero] = second[nonzero] / norms[nonzero, None]
    unit *= lambda_c
    grad[2:] += unit
    grad[1:-1] -= 2.0 * unit
    grad[:-2] += unit
    return loss, grad
