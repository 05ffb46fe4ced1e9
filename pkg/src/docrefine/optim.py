"""AdamW with per-group learning rates, plus the warmup/decay schedule."""

from __future__ import annotations

from typing import Iterable, Mapping

import numpy as np

from .params import Parameter
from .tensor import Tensor


class AdamW:
    """Decoupled weight decay Adam. Parameters without a gradient this step
    (or whose group lr is 0) are left bitwise untouched."""

    def __init__(
        self,
        params: Iterable[Parameter],
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.params = list(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {p.name: np.zeros_like(p.data) for p in self.params}
        self._v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self, grads: Mapping[Tensor, np.ndarray], lr: float | Mapping[str, float]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p in self.params:
            g = grads.get(p.tensor)
            if g is None:
                continue
            rate = lr[p.group] if isinstance(lr, Mapping) else lr
            if rate == 0.0:
                continue
            m = self._m[p.name]
            v = self._v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.tensor.data = p.data - rate * (update + self.weight_decay * p.data)


def warmup_linear_lr(step: int, total_steps: int, peak_lr: float, warmup_frac: float = 0.06) -> float:
    """Linear rise to peak over the first warmup fraction of steps, then
    linear decay to 0 at total_steps."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = warmup_frac * total_steps
    if warmup > 0 and step <= warmup:
        return peak_lr * step / warmup
    if total_steps == warmup:
        return peak_lr
    return peak_lr * (total_steps - step) / (total_steps - warmup)
