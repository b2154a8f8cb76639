"""Small layer library on top of ``tensor``."""
from __future__ import annotations

from typing import Dict, Iterator, List, Tuple

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


def _walk(val, name: str) -> Iterator[Tuple[str, Parameter]]:
    # parameters inside modules and arbitrarily nested lists, tuples and dicts
    if isinstance(val, Parameter):
        yield name, val
    elif isinstance(val, Module):
        yield from val.named_parameters(name + ".")
    elif isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            yield from _walk(item, f"{name}.{i}")
    elif isinstance(val, dict):
        for k, item in val.items():
            yield from _walk(item, f"{name}.{k}")


class Module:
    """Anything that owns parameters directly or through child modules."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, val in vars(self).items():
            yield from _walk(val, f"{prefix}{name}")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for n, p in own.items():
            if p.shape != state[n].shape:
                raise ValueError(f"shape mismatch for {n}: {p.shape} vs {state[n].shape}")
            p.data = np.array(state[n], dtype=np.float64, copy=True)

    def freeze(self) -> None:
        for p in self.parameters():
            p.trainable = False
            p.requires_grad = False


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True,
                 scale: float | None = None):
        s = np.sqrt(2.0 / n_in) if scale is None else scale
        self.weight = Parameter(rng.normal(0.0, s, size=(n_in, n_out)))
        self.bias = Parameter(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class MLP(Module):
    """Linear layers with an activation between them (none after the last)."""

    def __init__(self, sizes: List[int], rng: np.random.Generator, activation: str = "relu"):
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        act = T.relu if self.activation == "relu" else T.tanh
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = act(x)
        return x


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator):
        self.weight = Parameter(rng.normal(0.0, np.sqrt(2.0 / (c_in * k)), size=(c_out, c_in, k)))
        self.bias = Parameter(np.zeros(c_out))

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv1d(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator):
        fan = c_in * k * k
        self.weight = Parameter(rng.normal(0.0, np.sqrt(2.0 / fan), size=(c_out, c_in, k, k)))
        self.bias = Parameter(np.zeros(c_out))

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias)
