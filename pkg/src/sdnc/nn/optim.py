from __future__ import annotations

import numpy as np

from .layers import ModelParams


class MissingGradientError(RuntimeError):
    pass


class Adam:
    """Adam with bias correction. Moment state lives on the optimizer, keyed by parameter name."""

    def __init__(self, params: ModelParams, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        missing = [k for k, p in self.params.items() if p.grad is None]
        if missing:
            raise MissingGradientError(f"no gradient for {missing[:5]}{'...' if len(missing) > 5 else ''}")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


def adam_step(opt: Adam, lr: float | None = None) -> None:
    opt.step(lr)


def warmup_lr(step: int, base_lr: float, warmup_steps: int) -> float:
    """Linear warmup to ``base_lr`` over ``warmup_steps`` updates, then constant."""
    if warmup_steps <= 0:
        return base_lr
    return base_lr * min(1.0, (step + 1) / warmup_steps)
