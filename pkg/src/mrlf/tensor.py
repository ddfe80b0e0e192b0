"""Dense tensors with reverse-mode automatic differentiation.

Every operation that produces a :class:`Tensor` from tensors which require
gradients records its parents and a backward rule on the output.  Calling
:func:`backward` on a scalar walks that graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_grad_enabled = True


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation passes)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite value produced by {op!r}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_retain")

    def __init__(self, data, requires_grad: bool = False, dtype=None, op: str = "leaf"):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        if any(n <= 0 for n in arr.shape):
            raise ValueError(f"tensor dims must be positive, got shape {arr.shape}")
        _check_finite(arr, op)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._retain = False

    # -- introspection ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def retain_grad(self) -> "Tensor":
        """Keep ``grad`` on this non-leaf tensor after backward."""
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # -- arithmetic ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by python scalars")
        return mul(self, 1.0 / other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis: int):
        return reduce_max(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    """Wrap an op output; record the graph edge only if a parent needs grad."""
    out = Tensor(data, op=op)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# -- elementwise and structural ops ---------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, dtype=None)
    sa, sb = a.shape, b.shape
    return make_result(
        a.data + b.data, (a, b),
        lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        return unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)

    return make_result(ad * bd, (a, b), backward, "mul")


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    return make_result(
        ad ** exponent, (a,),
        lambda g: (g * exponent * ad ** (exponent - 1),), "pow")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul expects operands with at least 2 dims")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)

    return make_result(ad @ bd, (a, b), backward, "matmul")


def reduce_sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward, "sum")


def reduce_mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return reduce_sum(a, axis, keepdims) * (1.0 / n)


def reduce_max(a: Tensor, axis: int) -> Tensor:
    """Max over one axis; gradient goes to the first maximal entry."""
    axis = axis % a.ndim
    arg = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, arg, axis=axis).squeeze(axis)
    shape = a.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(gx, arg, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return make_result(out, (a,), backward, "max")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return make_result(
        np.transpose(a.data, axes), (a,),
        lambda g: (np.transpose(g, inverse),), "transpose")


# -- backward pass --------------------------------------------------------

@dataclass(frozen=True)
class RecordEntry:
    """One executed op: its identifier, inputs, output and backward rule."""

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward_rule: Callable


def computation_record(root: Tensor) -> list[RecordEntry]:
    """Topologically ordered list of the ops that produced ``root``."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return [RecordEntry(t.op, t._parents, t, t._backward) for t in order if t._parents]


def backward(loss: Tensor, leaves: Sequence[Tensor] = ()) -> list[RecordEntry]:
    """Populate ``grad`` on every grad-requiring leaf reachable from ``loss``.

    Tensors listed in ``leaves`` that the forward pass never touched get a
    zero gradient.  Grads are overwritten, not accumulated across calls.
    """
    if loss.size != 1 or loss.ndim > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    for leaf in leaves:
        leaf.grad = np.zeros_like(leaf.data) if leaf.requires_grad else None
    if not loss.requires_grad:
        return []
    record = computation_record(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for entry in reversed(record):
        g = grads.pop(id(entry.output), None)
        if g is None:
            continue
        if entry.output._retain:
            entry.output.grad = g
        for parent, pg in zip(entry.inputs, entry.backward_rule(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    # whatever is left belongs to leaves
    leaf_by_id = {id(p): p for e in record for p in e.inputs if p.is_leaf}
    for key, g in grads.items():
        leaf = leaf_by_id.get(key)
        if leaf is not None and leaf.requires_grad:
            _check_finite(g, "backward")
            leaf.grad = g
    return record
