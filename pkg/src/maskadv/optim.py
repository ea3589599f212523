"""Adam optimizer over named numpy parameter grids."""

from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t: dict[str, int] = {}

    def update(self, key: str, grad: np.ndarray) -> np.ndarray:
        """Return the step to subtract from the parameter for this gradient."""
        if key not in self._m:
            self._m[key] = np.zeros_like(grad)
            self._v[key] = np.zeros_like(grad)
            self._t[key] = 0
        self._t[key] += 1
        t = self._t[key]
        m = self._m[key]
        v = self._v[key]
        m *= self.beta1
        m += (1.0 - self.beta1) * grad
        v *= self.beta2
        v += (1.0 - self.beta2) * grad * grad
        m_hat = m / (1.0 - self.beta1**t)
        v_hat = v / (1.0 - self.beta2**t)
        return self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def clip_grad_norm(grad: np.ndarray, max_norm: float) -> np.ndarray:
    """Scale the gradient so its 2-norm does not exceed max_norm."""
    norm = float(np.sqrt(np.sum(grad * grad)))
    if norm > max_norm and norm > 0.0:
        return grad * (max_norm / norm)
    return grad
