"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Operations executed while a :class:`Tape` is active (``with Tape() as tape:``)
and touching a tensor that requires gradients are recorded on that tape.
:func:`backward` replays the recorded adjoints in reverse order.
"""

import logging
import threading
from typing import Callable, Optional, Sequence, Union

import numpy as np

from core.errors import DataError, DimensionError, NumericError

logger = logging.getLogger("EqDiff")

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = []
        _local.tapes = stack
    return stack


def active_tape() -> Optional["Tape"]:
    """The innermost tape opened on this thread, if any."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class _Node:
    __slots__ = ("out", "inputs", "vjp", "op")

    def __init__(self, out, inputs, vjp, op):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp
        self.op = op


class Tape:
    """Ordered record of primitive operations, confined to one thread."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: "Tensor", inputs: tuple, vjp: Callable, op: str) -> None:
        self.nodes.append(_Node(out, inputs, vjp, op))


class Tensor:
    """A dense float64 array that may take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "is_leaf")
    __array_priority__ = 100.0

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(self.data)):
            raise NumericError(f"tensor {name!r} initialised with non-finite values")
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.is_leaf = True

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        from core.ops import matmul

        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def make_result(data: np.ndarray, inputs: tuple, vjp: Callable, op: str) -> Tensor:
    """Wrap a primitive's output, checking finiteness and recording it."""
    data = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.is_leaf = False
    out.requires_grad = False
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, vjp, op)
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), vjp, "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), vjp, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), vjp, "mul")


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data / b.data, (a, b), vjp, "div")


def power(x: ArrayLike, exponent: float) -> Tensor:
    x = as_tensor(x)
    p = float(exponent)

    def vjp(g):
        return (g * p * np.power(x.data, p - 1.0),)

    return make_result(np.power(x.data, p), (x,), vjp, "power")


def exp(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)

    def vjp(g):
        return (g * y,)

    return make_result(y, (x,), vjp, "exp")


def reduce_sum(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)

    def vjp(g):
        if not keepdims and axes:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return make_result(x.data.sum(axis=axes, keepdims=keepdims), (x,), vjp, "sum")


def reduce_mean(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return reduce_sum(x, axes, keepdims) * (1.0 / count)


def _normalize_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def reshape(x: ArrayLike, shape: tuple) -> Tensor:
    x = as_tensor(x)
    try:
        y = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"cannot reshape {x.shape} to {tuple(shape)}") from e

    def vjp(g):
        return (g.reshape(x.shape),)

    return make_result(y, (x,), vjp, "reshape")


def transpose(x: ArrayLike, axes: tuple) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (g.transpose(inverse),)

    return make_result(x.data.transpose(axes), (x,), vjp, "transpose")


def _basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(
        isinstance(i, (slice, int, np.integer)) and not isinstance(i, bool) or i is Ellipsis or i is None
        for i in items
    )


def getitem(x: ArrayLike, index) -> Tensor:
    x = as_tensor(x)
    basic = _basic_index(index)

    def vjp(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[index] += g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return make_result(x.data[index], (x,), vjp, "getitem")


def broadcast_to(x: ArrayLike, shape: tuple) -> Tensor:
    x = as_tensor(x)
    try:
        y = np.broadcast_to(x.data, shape).copy()
    except ValueError as e:
        raise DimensionError(f"cannot broadcast {x.shape} to {tuple(shape)}") from e

    def vjp(g):
        return (unbroadcast(g, x.shape),)

    return make_result(y, (x,), vjp, "broadcast_to")


def concat(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax):
            raise DimensionError(
                f"concat along axis {axis} needs matching extents, got {[t.shape for t in tensors]}"
            )
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=ax))

    return make_result(np.concatenate([t.data for t in tensors], axis=ax), tensors, vjp, "concat")


def backward(loss: Tensor, tape: Tape, store=None) -> None:
    """Accumulate d(loss)/d(leaf) into every leaf tensor's ``grad``.

    When ``store`` is given, every parameter in it ends up with a gradient
    array; parameters off the differentiated path hold zeros.
    """
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.is_leaf and not any(node.out is loss for node in tape.nodes):
        raise DataError("loss was not recorded on the given tape")

    grads = {id(loss): np.ones_like(loss.data)}
    holders = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                holders[key] = inp

    for key, g in grads.items():
        leaf = holders[key]
        if not leaf.is_leaf:
            continue
        g = np.array(g, dtype=np.float64).reshape(leaf.shape)
        leaf.grad = g if leaf.grad is None else leaf.grad + g

    if store is not None:
        store.ensure_grads()
