"""Dense float tensors with taped reverse-mode differentiation.

The tape is define-by-run: wrap a forward pass in ``with Tape() as tape``,
run ordinary tensor ops, then call ``tape.backward(loss)`` to get a mapping
from every reachable tensor to its gradient. Ops executed outside a tape
(or touching only no-grad tensors) are plain numpy calls with no recording,
so evaluation passes carry no autodiff overhead.

Gradients of anything reached only through ``stop_gradient`` are exactly
zero: the barrier simply never records a backward edge.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

Array = np.ndarray

_DTYPE = np.float64
_DEBUG_CHECKS = False

_local = threading.local()


def set_default_dtype(dtype: str) -> None:
    """Select "float64" (default, required for gradient checks) or "float32"."""
    global _DTYPE
    if dtype not in ("float64", "float32"):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _DTYPE = np.float64 if dtype == "float64" else np.float32


def default_dtype():
    return _DTYPE


def set_debug_checks(on: bool) -> None:
    """When on, every op output is checked for NaN/Inf (hard error)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(on)


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = []
        _local.tapes = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense array plus a requires-grad flag. Values are never mutated by ops."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    # shape ops
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int]):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of differentiable ops; rebuilt per forward pass.

    ``backward`` walks the record in exact reverse order and returns a fresh
    gradient mapping each call, so repeated backward passes from the same
    tape state are identical.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple]] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._records)

    def backward(self, loss: Tensor) -> dict[Tensor, Array]:
        """Gradients of a scalar loss w.r.t. every tensor on the tape."""
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
        grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
        refs: dict[int, Tensor] = {id(loss): loss}
        for out, pulls in reversed(self._records):
            g = grads.get(id(out))
            if g is None:
                continue
            for t, vjp in pulls:
                dt = vjp(g)
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + dt
                else:
                    grads[key] = dt
                    refs[key] = t
        return {refs[k]: v for k, v in grads.items()}


def _record(name: str, data: Array, pulls) -> Tensor:
    """Finish an op: build the output tensor and record backward edges."""
    if _DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by op '{name}'")
    tape = _active_tape()
    live = [(t, vjp) for t, vjp in pulls if t.requires_grad]
    if tape is not None and live:
        out = Tensor(data, requires_grad=True)
        tape._records.append((out, tuple(live)))
        return out
    return Tensor(data)


def _unbroadcast(g: Array, shape: tuple) -> Array:
    """Reduce a gradient back down to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and linear algebra


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data
    return _record(
        "add",
        data,
        [(a, lambda g: _unbroadcast(g, a.data.shape)), (b, lambda g: _unbroadcast(g, b.data.shape))],
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data
    return _record(
        "sub",
        data,
        [(a, lambda g: _unbroadcast(g, a.data.shape)), (b, lambda g: _unbroadcast(-g, b.data.shape))],
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data
    return _record(
        "mul",
        data,
        [
            (a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
            (b, lambda g: _unbroadcast(g * a.data, b.data.shape)),
        ],
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data
    return _record(
        "div",
        data,
        [
            (a, lambda g: _unbroadcast(g / b.data, a.data.shape)),
            (b, lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)),
        ],
    )


def elementwise(a: Tensor, b: Tensor, op: str) -> Tensor:
    if op == "add":
        return add(a, b)
    if op == "sub":
        return sub(a, b)
    if op == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading batch dims broadcast like np.matmul."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul needs at least 2-D operands")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def da(g, a=a, b=b):
        return _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)

    def db(g, a=a, b=b):
        return _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)

    return _record("matmul", data, [(a, da), (b, db)])


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record("tanh", y, [(x, lambda g: g * (1.0 - y * y))])


def sigmoid(x: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-np.clip(x.data, -500, 500)))
    return _record("sigmoid", y, [(x, lambda g: g * y * (1.0 - y))])


# ---------------------------------------------------------------------------
# reductions and normalizations


def softmax(x: Tensor, axis: int) -> Tensor:
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def dx(g):
        return y * (g - np.sum(g * y, axis=axis, keepdims=True))

    return _record("softmax", y, [(x, dx)])


def logsumexp(x: Tensor, axis: int) -> Tensor:
    if x.data.shape[axis] == 0:
        raise ValueError("logsumexp over an empty axis")
    m = np.max(x.data, axis=axis, keepdims=True)
    y = m + np.log(np.sum(np.exp(x.data - m), axis=axis, keepdims=True))
    out = np.squeeze(y, axis=axis)

    def dx(g):
        soft = np.exp(x.data - y)
        return np.expand_dims(g, axis) * soft

    return _record("logsumexp", out, [(x, dx)])


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance over the last axis, then affine."""
    dim = x.data.shape[-1]
    if gain.data.shape != (dim,) or bias.data.shape != (dim,):
        raise ValueError("layer_norm gain/bias must match last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    lead = tuple(range(out.ndim - 1))

    def dx(g):
        gxh = g * gain.data
        return inv * (
            gxh
            - gxh.mean(axis=-1, keepdims=True)
            - xhat * (gxh * xhat).mean(axis=-1, keepdims=True)
        )

    def dgain(g):
        return (g * xhat).sum(axis=lead) if lead else g * xhat

    def dbias(g):
        return g.sum(axis=lead) if lead else g

    return _record("layer_norm", out, [(x, dx), (gain, dgain), (bias, dbias)])


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def dx(g):
        if axis is None:
            return np.broadcast_to(g, x.data.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, x.data.shape).copy()

    return _record("sum", data, [(x, dx)])


def tensor_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    return tensor_sum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


# ---------------------------------------------------------------------------
# structure


def reshape(x: Tensor, shape) -> Tensor:
    data = x.data.reshape(shape)
    return _record("reshape", data, [(x, lambda g: g.reshape(x.data.shape))])


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = x.data.transpose(axes)
    return _record("transpose", data, [(x, lambda g: g.transpose(inv))])


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ValueError("concat of an empty sequence")
    data = np.concatenate([t.data for t in xs], axis=axis)
    sizes = [t.data.shape[axis] for t in xs]
    offsets = np.cumsum([0] + sizes)

    pulls = []
    for i, t in enumerate(xs):
        def vjp(g, lo=offsets[i], hi=offsets[i + 1]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        pulls.append((t, vjp))
    return _record("concat", data, pulls)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    data = np.stack([t.data for t in xs], axis=axis)

    pulls = []
    for i, t in enumerate(xs):
        def vjp(g, i=i):
            return np.take(g, i, axis=axis)

        pulls.append((t, vjp))
    return _record("stack", data, pulls)


def take(x: Tensor, indices) -> Tensor:
    """Gather rows of x (axis 0) by an integer array of any shape."""
    idx = np.atleast_1d(np.asarray(indices))
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
        raise IndexError(f"take indices out of range for axis of size {x.data.shape[0]}")
    data = x.data[idx]

    def dx(g):
        # scatter-add via bincount over linearized coordinates (duplicates
        # in idx must accumulate); measurably faster than np.add.at
        flat_idx = idx.reshape(-1)
        row = int(np.prod(x.data.shape[1:], dtype=np.int64)) if x.data.ndim > 1 else 1
        weights = np.ascontiguousarray(g).reshape(flat_idx.size, row)
        lin = (flat_idx[:, None] * row + np.arange(row)).ravel()
        out = np.bincount(lin, weights=weights.ravel(), minlength=x.data.size)
        return out.reshape(x.data.shape).astype(x.data.dtype, copy=False)

    return _record("take", data, [(x, dx)])


def embedding_lookup(table: Tensor, ids) -> Tensor:
    return take(table, ids)


def column(x: Tensor, j: int) -> Tensor:
    """Select column j of a 2-D tensor."""
    if x.data.ndim != 2:
        raise ValueError("column expects a 2-D tensor")
    data = x.data[:, j]

    def dx(g):
        out = np.zeros_like(x.data)
        out[:, j] = g
        return out

    return _record("column", data, [(x, dx)])


# ---------------------------------------------------------------------------
# similarity and barriers


def cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity over the last axis: scalar for vectors, per-row for 2-D."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"cosine shape mismatch: {a.data.shape} vs {b.data.shape}")
    na = np.linalg.norm(a.data, axis=-1)
    nb = np.linalg.norm(b.data, axis=-1)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise ValueError("cosine of a zero vector")
    dot = np.sum(a.data * b.data, axis=-1)
    c = dot / (na * nb)

    def expand(v):
        return v[..., None]

    def da(g):
        return expand(g) * (b.data / expand(na * nb) - expand(c / (na * na)) * a.data)

    def db(g):
        return expand(g) * (a.data / expand(na * nb) - expand(c / (nb * nb)) * b.data)

    return _record("cosine", c, [(a, da), (b, db)])


def stop_gradient(x: Tensor) -> Tensor:
    """Identity forward; backward contributes zero to all ancestors of x."""
    return Tensor(x.data)
