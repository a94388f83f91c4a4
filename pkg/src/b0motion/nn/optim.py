"""Adam with loss-coupled L2 weight decay."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .autograd import Tensor


class Adam:
    """Classic Adam; weight decay enters as ``grad + decay * w`` before the moments.

    ``state`` (step count and per-tensor moments) is a plain dict so it can be
    checkpointed and restored.
    """

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, state: dict | None = None):
        if lr < 0 or weight_decay < 0 or eps <= 0:
            raise ValueError("lr and weight_decay must be >= 0 and eps > 0")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = state if state else {"step": 0, "m": {}, "v": {}}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        st = self.state
        st["step"] += 1
        t = st["step"]
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for i, p in enumerate(self.params):
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m = st["m"].get(i)
            v = st["v"].get(i)
            m = (1 - self.beta1) * g if m is None else self.beta1 * m + (1 - self.beta1) * g
            v = (1 - self.beta2) * g * g if v is None else self.beta2 * v + (1 - self.beta2) * g * g
            st["m"][i] = m
            st["v"][i] = v
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype, copy=False)
