"""Adam optimizer with decoupled weight decay and a cosine learning rate."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


class Adam:
    """Adam with decoupled (AdamW-style) weight decay.

    Parameters are updated in place on their data buffers; the autodiff
    graph never sees optimizer arithmetic. Missing gradients (disconnected
    parameters) are treated as zero updates.
    """

    def __init__(self, params: list[Tensor], lr: float = 3e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.step_count
        bias2 = 1.0 - b2**self.step_count
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= lr * update


def cosine_lr(step: int, total_steps: int, base_lr: float, final_frac: float = 0.1) -> float:
    """Cosine decay from base_lr to final_frac * base_lr over total_steps."""
    if total_steps <= 1:
        return base_lr
    progress = min(max(step / (total_steps - 1), 0.0), 1.0)
    floor = base_lr * final_frac
    return floor + 0.5 * (base_lr - floor) * (1.0 + math.cos(math.pi * progress))
