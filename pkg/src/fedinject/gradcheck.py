"""Central finite-difference check of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Parameter, Tensor, backward


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(f: Callable[[], Tensor], params: Sequence[Parameter], tolerance: float = 1e-4,
               step: float = 1e-5, floor: float = 1e-6, max_entries: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare backprop gradients of scalar ``f()`` with central differences.

    Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``. With
    ``max_entries`` set, a random subset of entries of each parameter is
    probed (drawn from ``rng``).
    """
    for p in params:
        p.grad = None
    backward(f())
    worst, worst_name, count = 0.0, "", 0
    for i, p in enumerate(params):
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        p.grad = None
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        for j in idx:
            orig = flat[j]
            flat[j] = orig + step
            fp = f().item()
            flat[j] = orig - step
            fm = f().item()
            flat[j] = orig
            num = (fp - fm) / (2 * step)
            a = analytic.reshape(-1)[j]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            count += 1
            if err > worst:
                worst, worst_name = err, p.name or f"param{i}"
    return GradCheckReport(worst, worst_name, count, tolerance)
