from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import Tensor, backward, no_grad
from .layers import ModelParams


@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def worst(self) -> tuple[str, float]:
        if not self.errors:
            return ("", 0.0)
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    @property
    def passed(self) -> bool:
        return self.worst[1] <= self.tolerance

    def __str__(self) -> str:
        name, err = self.worst
        return f"grad check {'ok' if self.passed else 'FAILED'}: worst {name} rel err {err:.3e} (tol {self.tolerance:g})"


def grad_check(
    forward: Callable[[], Tensor],
    params: ModelParams,
    tolerance: float = 1e-4,
    h: float = 1e-5,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences, entry by entry.

    The per-entry relative error is ``|a - n| / max(|a|, |n|, floor)``; the
    report keeps the maximum for each parameter tensor. Parameters must be
    double precision.
    """
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise TypeError(f"parameter {name} is {p.data.dtype}; grad check needs float64")
    params.zero_grad()
    backward(forward())
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in params.items()}

    report = GradCheckReport(tolerance=tolerance)
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            num = np.empty_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = forward().item()
                flat[i] = orig - h
                fm = forward().item()
                flat[i] = orig
                num[i] = (fp - fm) / (2 * h)
            a = analytic[name].reshape(-1)
            denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), floor)
            report.errors[name] = float(np.max(np.abs(a - num) / denom)) if flat.size else 0.0
    params.zero_grad()
    return report
