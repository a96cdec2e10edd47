"""Adam with L2 weight decay folded into the gradient."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from konvlina.core.tensor import Parameter


class Adam:
    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr, self.eps, self.weight_decay = lr, eps, weight_decay
        self.beta1, self.beta2 = betas
        self.t = 0
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]

    def step(self, grads: Mapping[int, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            g = grads[p.id]
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            step = self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.assign(p.data - step)


def clip_grad_norm(grads: dict[int, np.ndarray], params: Sequence[Parameter], max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping. ``max_norm <= 0`` disables clipping.
    """
    norm = float(np.sqrt(sum(float(np.sum(grads[p.id] ** 2)) for p in params)))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            grads[p.id] = grads[p.id] * scale
    return norm
