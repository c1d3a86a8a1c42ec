"""AdamW with cosine learning-rate decay over a flat parameter vector."""
from __future__ import annotations

import math

import numpy as np


def cosine_lr(base_lr: float, step: int, total_steps: int, warmup_steps: int = 0) -> float:
    if warmup_steps and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    if total_steps <= warmup_steps:
        return base_lr
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


class AdamW:
    """Adaptive moments with weight decay decoupled from the gradient.

    ``decay_mask`` selects the entries that receive weight decay (matrices;
    not biases, norm gains or bucket biases).
    """

    def __init__(self, size: int, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01,
                 decay_mask: np.ndarray | None = None):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.decay_mask = np.ones(size, dtype=bool) if decay_mask is None else decay_mask

    def step(self, params: np.ndarray, grad: np.ndarray, lr: float) -> None:
        """Update ``params`` in place."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        self.m *= b1
        self.m += (1 - b1) * grad
        self.v *= b2
        self.v += (1 - b2) * grad * grad
        mhat = self.m / (1 - b1 ** self.t)
        vhat = self.v / (1 - b2 ** self.t)
        if lr == 0:
            return
        if self.weight_decay:
            params[self.decay_mask] -= lr * self.weight_decay * params[self.decay_mask]
        params -= lr * mhat / (np.sqrt(vhat) + self.eps)
