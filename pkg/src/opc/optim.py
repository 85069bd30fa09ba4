"""Adam over a list of numpy arrays, updated in place."""

from __future__ import annotations

import numpy as np

__all__ = ["Adam"]


class Adam:
    def __init__(self, shapes, lr=1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        """``lr`` is a scalar or one rate per parameter group."""
        self.shapes = [tuple(s) for s in shapes]
        self.lr = [float(lr)] * len(self.shapes) if np.isscalar(lr) else [float(r) for r in lr]
        if len(self.lr) != len(self.shapes):
            raise ValueError("one learning rate per parameter group is required")
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros(s) for s in self.shapes]
        self.v = [np.zeros(s) for s in self.shapes]
        self.t = 0

    def step(self, params, grads) -> None:
        """Descend: ``p -= lr * m_hat / (sqrt(v_hat) + eps)``."""
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            p -= self.lr[i] * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)

    def scale_lr(self, factor: float) -> None:
        self.lr = [r * factor for r in self.lr]

    def state(self) -> dict:
        return {"t": self.t, "lr": list(self.lr), "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}
