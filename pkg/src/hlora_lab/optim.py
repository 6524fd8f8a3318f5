"""Adam with per-tensor learning rates and optional update masks."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class Adam:
    """Adam(W); ``weight_decay`` is decoupled and 0 gives plain Adam."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(
        self,
        params: dict[str, Tensor],
        lrs: dict[str, float] | float,
        masks: dict[str, np.ndarray] | None = None,
    ) -> None:
        """Update every tensor that has a gradient; masked entries never move."""
        masks = masks or {}
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            mask = masks.get(name)
            if mask is not None:
                g = g * mask
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
                self.t[name] = 0
            self.t[name] += 1
            t = self.t[name]
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = (m / (1 - self.beta1**t)) / (np.sqrt(v / (1 - self.beta2**t)) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            if mask is not None:
                update = update * mask
            lr = lrs if isinstance(lrs, float) else lrs[name]
            p.data -= lr * update
