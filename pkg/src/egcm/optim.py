from __future__ import annotations

from typing import Callable

import numpy as np


def warmup_linear(total_steps: int, warmup_fraction: float = 0.1) -> Callable[[int], float]:
    """Multiplier for step 1..total: linear ramp to 1, then linear decay to 0."""
    total = max(int(total_steps), 1)
    warm = max(1, int(round(warmup_fraction * total)))

    def factor(step: int) -> float:
        if step <= warm:
            return step / warm
        if total == warm:
            return 1.0
        return max(0.0, (total - step) / (total - warm))

    return factor


class Adam:
    """Adam with decoupled L2 decay on the parameters ``decay_filter`` accepts."""

    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-6,
                 weight_decay: float = 0.0, decay_filter: Callable[[str], bool] | None = None,
                 schedule: Callable[[int], float] | None = None):
        self.params = params
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.decay = {n: (decay_filter(n) if decay_filter else True) for n in params}
        self.schedule = schedule or (lambda step: 1.0)
        self.m = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.t = 0

    @property
    def current_lr(self) -> float:
        return self.lr * self.schedule(max(self.t, 1))

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def step(self) -> None:
        self.t += 1
        lr = self.lr * self.schedule(self.t)
        b1, b2 = self.betas
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and self.decay[name]:
                update = update + self.weight_decay * p.data
            p.data -= (lr * update).astype(p.data.dtype)
