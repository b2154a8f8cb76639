"""SGD and Adam over lists of ``Parameter``.

Parameters the last backward pass did not reach (``grad is None``) are
skipped entirely, including Adam's moment decay and step counter. This keeps
the trajectory of one task's parameters independent of steps taken on other
tasks' batches.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List

import numpy as np

from .tensor import Parameter


@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # keyed by id(param); (m, v, t)
    moments: Dict[int, list] = field(default_factory=dict)

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")


def step(params: Iterable[Parameter], opt: OptimizerState) -> None:
    for p in params:
        if not p.trainable or p.grad is None:
            p.grad = None
            continue
        g = p.grad
        if opt.kind == "sgd":
            p.data = p.data - opt.learning_rate * g
        else:
            st = opt.moments.get(id(p))
            if st is None:
                st = opt.moments[id(p)] = [np.zeros_like(p.data), np.zeros_like(p.data), 0]
            m, v, t = st
            t += 1
            m = opt.adam_beta1 * m + (1.0 - opt.adam_beta1) * g
            v = opt.adam_beta2 * v + (1.0 - opt.adam_beta2) * (g * g)
            mhat = m / (1.0 - opt.adam_beta1 ** t)
            vhat = v / (1.0 - opt.adam_beta2 ** t)
            p.data = p.data - opt.learning_rate * mhat / (np.sqrt(vhat) + opt.adam_eps)
            st[0], st[1], st[2] = m, v, t
        p.grad = None


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad = None


class Optimizer:
    """Binds a parameter list to an ``OptimizerState``."""

    def __init__(self, params: List[Parameter], kind: str = "adam", lr: float = 1e-3, **kw):
        self.params = list(params)
        self.state = OptimizerState(kind=kind, learning_rate=lr, **kw)

    def step(self) -> None:
        step(self.params, self.state)

    def zero_grad(self) -> None:
        zero_grad(self.params)
