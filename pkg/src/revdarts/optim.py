from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor


def inverse_sqrt_schedule(peak_lr: float, warmup: int) -> Callable[[int], float]:
    """Linear warmup to ``peak_lr`` then decay proportional to 1/sqrt(step)."""
    warmup = max(int(warmup), 1)

    def lr(step: int) -> float:
        step = max(step, 1)
        return peak_lr * min(step / warmup, math.sqrt(warmup / step))

    return lr


class Adam:
    """Adam with optional L2 weight decay folded into the gradient."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.98), eps: float = 1e-8,
                 weight_decay: float = 0.0, schedule: Optional[Callable[[int], float]] = None):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.schedule = schedule
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def current_lr(self) -> float:
        return self.schedule(self.t) if self.schedule is not None else self.lr

    def step(self) -> None:
        self.t += 1
        lr = self.current_lr()
        if lr == 0.0:
            return
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                if not self.weight_decay:
                    continue
                g = np.zeros_like(p.data)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state(self) -> dict:
        return {"t": self.t, "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}

    def load_state(self, state: dict) -> None:
        self.t = state["t"]
        self.m = [a.copy() for a in state["m"]]
        self.v = [a.copy() for a in state["v"]]
