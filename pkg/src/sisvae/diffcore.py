"""Dense fp64 tensors with tape-based reverse-mode differentiation.

Only the operations needed by the sequential VAE are provided. Broadcasting is
restricted to two cases: a scalar against anything, and a matrix against a
vector that is applied to every row.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "DomainError",
    "TapeError",
    "tensor",
    "constant",
    "add",
    "sub",
    "mul",
    "matmul",
    "concat",
    "slice_last",
    "sum",
    "mean",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "softplus",
    "square",
    "negate",
    "scalar_mul",
    "forward_op",
    "backward",
    "grad_check",
]


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


_ids = itertools.count()


class Tensor:
    """An fp64 array that may participate in a differentiable graph."""

    __array_priority__ = 100

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id = next(_ids)
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.size == 1 else float("nan")

    def __float__(self) -> float:
        if self.size != 1:
            raise ShapeError(f"cannot convert tensor of shape {self.shape} to float")
        return float(self.values.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.values!r}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.values)

    __add__ = lambda self, other: add(self, other)  # noqa: E731
    __radd__ = lambda self, other: add(other, self)  # noqa: E731
    __sub__ = lambda self, other: sub(self, other)  # noqa: E731
    __rsub__ = lambda self, other: sub(other, self)  # noqa: E731
    __mul__ = lambda self, other: mul(self, other)  # noqa: E731
    __rmul__ = lambda self, other: mul(other, self)  # noqa: E731
    __matmul__ = lambda self, other: matmul(self, other)  # noqa: E731
    __neg__ = lambda self: negate(self)  # noqa: E731


def tensor(values, requires_grad: bool = False) -> Tensor:
    return Tensor(values, requires_grad=requires_grad)


def constant(values) -> Tensor:
    return values if isinstance(values, Tensor) else Tensor(values)


class _Record:
    __slots__ = ("kind", "inputs", "output", "backward")

    def __init__(self, kind, inputs, output, backward):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of the differentiable ops executed while it is active.

    Use as a context manager to scope a forward pass; outside any ``with``
    block ops go to a per-thread default tape that is renewed once consumed.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.records)

    def __enter__(self) -> Tape:
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def record(self, kind, inputs, output, backward_fn) -> None:
        if self.consumed:
            raise TapeError("tape already consumed by a backward pass")
        self.records.append(_Record(kind, inputs, output, backward_fn))
        output._tape = self

    def clear(self) -> None:
        self.records.clear()
        self.consumed = True


_local = threading.local()


def _stack() -> list[Tape]:
    st = getattr(_local, "stack", None)
    if st is None:
        st = _local.stack = []
    return st


def _active_tape() -> Tape:
    st = _stack()
    if st:
        return st[-1]
    default = getattr(_local, "default", None)
    if default is None or default.consumed:
        default = _local.default = Tape()
    return default


def _emit(kind: str, inputs: Sequence[Tensor], values: np.ndarray, backward_fn) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(values, requires_grad=needs)
    if needs:
        _active_tape().record(kind, tuple(inputs), out, backward_fn)
    return out


# ---------------------------------------------------------------------------
# broadcasting helpers


def _broadcast_kind(a: np.ndarray, b: np.ndarray, op: str) -> str:
    if a.shape == b.shape:
        return "same"
    if b.size == 1 and b.ndim == 0:
        return "b_scalar"
    if a.size == 1 and a.ndim == 0:
        return "a_scalar"
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return "b_row"
    if b.ndim == 2 and a.ndim == 1 and b.shape[1] == a.shape[0]:
        return "a_row"
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce(g: np.ndarray, side: str, mode: str) -> np.ndarray:
    # side is "a" or "b"; collapse broadcast axes back to the operand's shape
    if mode == f"{side}_scalar":
        return np.asarray(g.sum())
    if mode == f"{side}_row":
        return g.sum(axis=0)
    return g


def _binary_inputs(a, b) -> tuple[Tensor, Tensor]:
    return constant(a), constant(b)


# ---------------------------------------------------------------------------
# elementwise binary ops


def add(a, b) -> Tensor:
    a, b = _binary_inputs(a, b)
    mode = _broadcast_kind(a.values, b.values, "add")

    def bw(g):
        return _reduce(g, "a", mode), _reduce(g, "b", mode)

    return _emit("add", (a, b), a.values + b.values, bw)


def sub(a, b) -> Tensor:
    a, b = _binary_inputs(a, b)
    mode = _broadcast_kind(a.values, b.values, "sub")

    def bw(g):
        return _reduce(g, "a", mode), -_reduce(g, "b", mode)

    return _emit("sub", (a, b), a.values - b.values, bw)


def mul(a, b) -> Tensor:
    a, b = _binary_inputs(a, b)
    mode = _broadcast_kind(a.values, b.values, "mul")
    av, bv = a.values, b.values

    def bw(g):
        return _reduce(g * bv, "a", mode), _reduce(g * av, "b", mode)

    return _emit("mul_elementwise", (a, b), av * bv, bw)


def scalar_mul(a, c: float) -> Tensor:
    a = constant(a)
    c = float(c)
    return _emit("scalar_mul", (a,), a.values * c, lambda g: (g * c,))


def negate(a) -> Tensor:
    a = constant(a)
    return _emit("negate", (a,), -a.values, lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """Matrix product for (n,k)@(k,m), (n,k)@(k,) and (k,)@(k,m)."""
    a, b = _binary_inputs(a, b)
    av, bv = a.values, b.values
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2) or (av.ndim == 1 and bv.ndim == 1):
        raise ShapeError(f"matmul: unsupported shapes {av.shape} and {bv.shape}")
    if av.shape[-1] != bv.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {av.shape} and {bv.shape}")

    def bw(g):
        if av.ndim == 2 and bv.ndim == 2:
            return g @ bv.T, av.T @ g
        if av.ndim == 2:
            return np.outer(g, bv), av.T @ g
        return bv @ g, np.outer(av, g)

    return _emit("matmul", (a, b), av @ bv, bw)


# ---------------------------------------------------------------------------
# structural ops


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    """Concatenate along the last dimension."""
    if axis != -1:
        raise ShapeError("concat only supports the last dimension")
    ts = [constant(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    lead = ts[0].shape[:-1]
    for t in ts:
        if t.ndim == 0 or t.shape[:-1] != lead:
            raise ShapeError(f"concat: incompatible shapes {[x.shape for x in ts]}")
    widths = [t.shape[-1] for t in ts]
    bounds = np.cumsum([0] + widths)

    def bw(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(ts)))

    return _emit("concat_lastdim", ts, np.concatenate([t.values for t in ts], axis=-1), bw)


def slice_last(a, start: int, stop: int) -> Tensor:
    a = constant(a)
    if a.ndim == 0:
        raise ShapeError("slice: cannot slice a scalar")
    width = a.shape[-1]
    if not (0 <= start < stop <= width):
        raise ShapeError(f"slice: bounds [{start}, {stop}) invalid for shape {a.shape}")

    def bw(g):
        full = np.zeros_like(a.values)
        full[..., start:stop] = g
        return (full,)

    return _emit("slice", (a,), a.values[..., start:stop].copy(), bw)


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001
    a = constant(a)
    shape = a.shape
    if axis is None:

        def bw(g):
            return (np.broadcast_to(g, shape).copy(),)

        return _emit("sum", (a,), np.asarray(a.values.sum()), bw)

    ax = axis % a.ndim

    def bw_axis(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return _emit("sum", (a,), a.values.sum(axis=ax), bw_axis)


def mean(a, axis: int | None = None) -> Tensor:
    a = constant(a)
    n = a.size if axis is None else a.shape[axis]
    shape = a.shape
    if axis is None:

        def bw(g):
            return (np.full(shape, float(g) / n),)

        return _emit("mean", (a,), np.asarray(a.values.mean()), bw)

    ax = axis % a.ndim

    def bw_axis(g):
        return (np.broadcast_to(np.expand_dims(g / n, ax), shape).copy(),)

    return _emit("mean", (a,), a.values.mean(axis=ax), bw_axis)


# ---------------------------------------------------------------------------
# unary elementwise


def exp(a) -> Tensor:
    a = constant(a)
    out = np.exp(a.values)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def log(a) -> Tensor:
    a = constant(a)
    v = a.values
    if np.any(v <= 0):
        bad = np.argwhere(v <= 0)[0]
        raise DomainError(f"log: non-positive input {v[tuple(bad)]!r} at index {tuple(bad)}")
    return _emit("log", (a,), np.log(v), lambda g: (g / v,))


def tanh(a) -> Tensor:
    a = constant(a)
    out = np.tanh(a.values)
    return _emit("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    a = constant(a)
    out = _sigmoid(a.values)
    return _emit("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    a = constant(a)
    v = a.values
    out = np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))
    return _emit("softplus", (a,), out, lambda g: (g * _sigmoid(v),))


def square(a) -> Tensor:
    a = constant(a)
    v = a.values
    return _emit("square", (a,), v * v, lambda g: (2.0 * g * v,))


_OPS: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul_elementwise": mul,
    "matmul": matmul,
    "concat_lastdim": lambda *ts: concat(ts),
    "slice": slice_last,
    "sum": sum,
    "mean": mean,
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "square": square,
    "negate": negate,
    "scalar_mul": scalar_mul,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch an op by name, e.g. ``forward_op("slice", x, 0, 3)``."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# reverse pass


def backward(root: Tensor) -> dict[int, np.ndarray]:
    """Propagate d(root)/d(leaf) into every requires_grad leaf's ``grad``.

    Returns a map from leaf ``node_id`` to the gradient deposited by this
    call. The tape is cleared afterwards and cannot be replayed.
    """
    if root.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise TapeError("backward: root does not depend on any requires_grad tensor")
    tape = root._tape
    if tape is None:
        # a requires_grad leaf used directly as the root
        g = np.ones_like(root.values)
        root.grad = g if root.grad is None else root.grad + g
        return {root.node_id: g}
    if tape.consumed:
        raise TapeError("backward: tape already consumed")

    pending: dict[int, np.ndarray] = {root.node_id: np.ones_like(root.values)}
    leaf_grads: dict[int, np.ndarray] = {}
    for rec in reversed(tape.records):
        g = pending.pop(rec.output.node_id, None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if not inp.requires_grad:
                continue
            key = inp.node_id
            if inp._tape is tape:
                prev = pending.get(key)
                pending[key] = gi if prev is None else prev + gi
            elif inp._tape is None:
                prev = leaf_grads.get(key)
                leaf_grads[key] = gi if prev is None else prev + gi
                inp.grad = np.array(gi, dtype=np.float64) if inp.grad is None else inp.grad + gi
    tape.clear()
    return leaf_grads


def grad_check(fn: Callable[[Tensor], Tensor], point, step: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences.

    ``fn`` maps a 1-d parameter Tensor to a scalar Tensor.
    """
    if not (0.0 < step <= 1e-2):
        raise ValueError(f"step must lie in (0, 1e-2], got {step}")
    x0 = np.array(point, dtype=np.float64).reshape(-1)
    x = Tensor(x0.copy(), requires_grad=True)
    with Tape():
        out = fn(x)
    if not np.isfinite(out.values).all():
        raise DomainError("grad_check: fn returned a non-finite value at the base point")
    if out.requires_grad:
        backward(out)
        analytic = x.grad if x.grad is not None else np.zeros_like(x0)
    else:
        analytic = np.zeros_like(x0)

    worst = 0.0
    for i in range(x0.size):
        probe = x0.copy()
        probe[i] += step
        f_plus = float(fn(Tensor(probe)))
        probe[i] = x0[i] - step
        f_minus = float(fn(Tensor(probe)))
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise DomainError(f"grad_check: non-finite value probing coordinate {i}")
        numeric = (f_plus - f_minus) / (2.0 * step)
        a = float(analytic[i])
        denom = max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, abs(a - numeric) / denom)
    return worst
