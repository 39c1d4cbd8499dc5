import math

import numpy as np


def cosine_lr(step: int, total: int, peak: float, floor_ratio: float = 0.1) -> float:
    """Cosine decay from ``peak`` at step 0 to ``floor_ratio * peak`` at the last step."""
    if total <= 1:
        return peak
    frac = step / (total - 1)
    return peak * (floor_ratio + (1.0 - floor_ratio) * 0.5 * (1.0 + math.cos(math.pi * frac)))


class AdamW:
    """Adam moments with decoupled weight decay, updating numpy arrays in place."""

    def __init__(self, params: dict, lr=1e-3, betas=(0.95, 0.999), eps=1e-8, weight_decay=1e-6):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        # per-parameter step counts so bias correction restarts for groups that were frozen
        self.steps = {k: 0 for k in params}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None, frozen=()):
        """One update; names listed in ``frozen`` keep their values and moments untouched."""
        lr = self.lr if lr is None else lr
        self.t += 1
        for name in sorted(self.params):
            if name in frozen:
                continue
            p = self.params[name]
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            m, v = self.m[name], self.v[name]
            self.steps[name] += 1
            c1 = 1.0 - self.beta1 ** self.steps[name]
            c2 = 1.0 - self.beta2 ** self.steps[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / c1 / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p.data)
