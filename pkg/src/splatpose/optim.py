"""Minimal Adam with per-array learning rates.

Parameters that live on manifolds (pose increments, per-Gaussian rotation
tangents) are optimized through re-centered tangent coordinates: the caller
feeds the gradient at the current point, takes the proposed step, applies it
to the manifold and keeps the moment state across steps.
"""

from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, shapes_and_lrs, beta1=0.9, beta2=0.999, eps=1e-8):
        """shapes_and_lrs: dict name -> (shape, lr)."""
        self.lr = {k: lr for k, (shape, lr) in shapes_and_lrs.items()}
        self.m = {k: np.zeros(shape) for k, (shape, lr) in shapes_and_lrs.items()}
        self.v = {k: np.zeros(shape) for k, (shape, lr) in shapes_and_lrs.items()}
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0

    def step(self, grads, lr_scale: float = 1.0):
        """Return dict name -> update to *add* to each parameter."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        out = {}
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            m_hat = self.m[k] / c1
            v_hat = self.v[k] / c2
            out[k] = -(self.lr[k] * lr_scale) * m_hat / (np.sqrt(v_hat) + self.eps)
        return out


def exponential_decay(iteration: int, total: int, final_factor: float) -> float:
    """lr multiplier decaying from 1 to final_factor over `total` steps."""
    if total <= 1 or final_factor >= 1.0:
        return 1.0
    return float(final_factor ** (iteration / (total - 1)))
