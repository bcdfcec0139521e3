"""Adam optimiser and gradient clipping."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError, NumericError


def clip_grad_norm(grads: dict, max_norm: float):
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
    if not np.isfinite(total):
        raise NumericError("gradient norm is not finite")
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for n in grads:
            grads[n] = grads[n] * scale
    return total


class Adam:
    """Bias-corrected Adam with per-parameter step counters.

    Parameters left out of a step keep their moments and step count, so a
    branch that is inactive for a batch is not dragged by stale momentum.
    """

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, params, grads: dict, names=None, lr=None):
        lr = self.lr if lr is None else lr
        names = list(params) if names is None else list(names)
        missing = [n for n in names if n not in grads]
        if missing:
            raise ConfigError(f"no gradient for parameters: {', '.join(missing)}")
        b1, b2 = self.beta1, self.beta2
        for n in names:
            p = params[n]
            g = np.asarray(grads[n], dtype=p.data.dtype)
            if n not in self.m:
                self.m[n] = np.zeros_like(p.data)
                self.v[n] = np.zeros_like(p.data)
                self.t[n] = 0
            self.t[n] += 1
            t = self.t[n]
            self.m[n] = b1 * self.m[n] + (1 - b1) * g
            self.v[n] = b2 * self.v[n] + (1 - b2) * g * g
            m_hat = self.m[n] / (1 - b1 ** t)
            v_hat = self.v[n] / (1 - b2 ** t)
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return params


def adam_step(params, grads, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, optimizer=None):
    """Functional form; pass the same ``optimizer`` across calls to keep moments."""
    opt = optimizer or Adam(lr, beta1, beta2, eps)
    opt.step(params, grads, lr=lr)
    return opt
