"""Parameter containers and small layers built on the autodiff ops."""
from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import ops
from .tensor import Tensor
from ..rng import stream


class ParamStore:
    """Ordered name -> parameter map; init draws are keyed by parameter name."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, values: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(values, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def glorot(self, name: str, fan_in: int, fan_out: int) -> Tensor:
        limit = np.sqrt(6.0 / max(fan_in + fan_out, 1))
        rng = stream(self.seed, "init/" + name)
        return self.add(name, rng.uniform(-limit, limit, size=(fan_in, fan_out)))

    def zeros(self, name: str, *shape: int) -> Tensor:
        return self.add(name, np.zeros(shape))

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list:
        return list(self._params)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def state_dict(self) -> dict:
        return {k: v.values.copy() for k, v in self._params.items()}

    def load_state_dict(self, state: dict) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ValueError(f"parameter mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, v in state.items():
            v = np.asarray(v, dtype=np.float64)
            if v.shape != self._params[k].shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {self._params[k].shape}")
            self._params[k].values = v.copy()


class Linear:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int):
        self.w = store.glorot(f"{name}.w", d_in, d_out)
        self.b = store.zeros(f"{name}.b", d_out)

    def __call__(self, x) -> Tensor:
        return ops.add(ops.matmul(x, self.w), self.b)


class Mlp:
    """Linear -> ELU -> Linear, the read-out used by every estimator head."""

    def __init__(self, store: ParamStore, name: str, d_in: int, d_hidden: int, d_out: int):
        self.l1 = Linear(store, f"{name}.l1", d_in, d_hidden)
        self.l2 = Linear(store, f"{name}.l2", d_hidden, d_out)

    def __call__(self, x) -> Tensor:
        return self.l2(ops.elu(self.l1(x)))


def maybe_dropout(x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    return ops.dropout(x, p, training, rng) if training and p > 0 else x
