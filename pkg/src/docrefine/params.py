"""Named, grouped trainable parameters and their initialization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

GROUPS = ("encoder", "base", "inference")


@dataclass
class Parameter:
    tensor: Tensor
    name: str
    group: str

    def __post_init__(self):
        if self.group not in GROUPS:
            raise ValueError(f"parameter {self.name!r}: unknown group {self.group!r}")

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data


class ParameterSet:
    """Ordered registry of parameters; creation order is the save/load order.

    Weight matrices start uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)],
    biases at zero, norm gains at one. All draws come from the given rng,
    so a seed fully determines the initial state.
    """

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self._params: dict[str, Parameter] = {}

    def _register(self, name: str, group: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True)
        self._params[name] = Parameter(t, name, group)
        return t

    def weight(self, name: str, group: str, shape: tuple, fan_in: int | None = None) -> Tensor:
        fan = fan_in if fan_in is not None else shape[0]
        bound = 1.0 / np.sqrt(fan)
        return self._register(name, group, self.rng.uniform(-bound, bound, size=shape))

    def zeros(self, name: str, group: str, shape: tuple) -> Tensor:
        return self._register(name, group, np.zeros(shape))

    def ones(self, name: str, group: str, shape: tuple) -> Tensor:
        return self._register(name, group, np.ones(shape))

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def names(self) -> list[str]:
        return list(self._params)

    def group(self, group: str) -> list[Parameter]:
        return [p for p in self._params.values() if p.group == group]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self._params.values()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ValueError(f"state mismatch: missing={sorted(missing)}, extra={sorted(extra)}")
        for name, arr in state.items():
            p = self._params[name]
            if p.data.shape != arr.shape:
                raise ValueError(f"parameter {name!r}: shape {arr.shape} != {p.data.shape}")
            p.tensor.data = np.array(arr, dtype=p.data.dtype)
