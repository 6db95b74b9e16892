"""Parameter registry and the few dense building blocks the model needs."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .numcore import Parameter, Tensor, ops


class ParamStore:
    """Ordered, uniquely named collection of parameters."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, value: np.ndarray) -> Parameter:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = Parameter(value, name)
        self._params[name] = p
        return p

    def normal(self, name: str, shape: tuple, std: float) -> Parameter:
        return self.add(name, self.rng.normal(0.0, std, size=shape))

    def zeros(self, name: str, shape: tuple) -> Parameter:
        return self.add(name, np.zeros(shape))

    def ones(self, name: str, shape: tuple) -> Parameter:
        return self.add(name, np.ones(shape))

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self._params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for n, p in self._params.items():
            if arrays[n].shape != p.shape:
                raise ValueError(f"{n}: checkpoint shape {arrays[n].shape} != {p.shape}")
            p.data[...] = arrays[n]


_ACTIVATIONS = {
    "gelu": ops.gelu,
    "tanh": ops.tanh,
    "linear": lambda x: x,
}


class Linear:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int, bias: bool = True):
        self.W = store.normal(f"{name}.W", (d_in, d_out), 1.0 / math.sqrt(d_in))
        self.b = store.zeros(f"{name}.b", (d_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, self.W)
        return ops.add(y, self.b) if self.b is not None else y


class MLP:
    """Two-layer perceptron ``d_in -> d_hidden -> d_out``."""

    def __init__(self, store: ParamStore, name: str, d_in: int, d_hidden: int, d_out: int,
                 activation: str = "gelu"):
        self.fc1 = Linear(store, f"{name}.fc1", d_in, d_hidden)
        self.fc2 = Linear(store, f"{name}.fc2", d_hidden, d_out)
        self.act = _ACTIVATIONS[activation]

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self.act(self.fc1(x)))


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, d: int):
        self.gain = store.ones(f"{name}.gain", (d,))
        self.bias = store.zeros(f"{name}.bias", (d,))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.add(ops.mul(ops.layer_norm(x), self.gain), self.bias)
