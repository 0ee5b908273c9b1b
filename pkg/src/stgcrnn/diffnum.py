"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation appends one node to the active
:class:`ComputationRecord`.  Nodes are appended after their inputs exist, so
the record is topologically ordered by construction and :func:`backward`
walks it in reverse.  There is no implicit broadcasting: operands of the
elementwise operations must have identical shapes, and the few shape-changing
operations (:func:`reshape`, :func:`concat`, :func:`add_bias`, ...) are
explicit.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DeterminismError, DimensionError

DTYPE = np.float64

__all__ = [
    "Tensor", "ComputationRecord", "current_record", "fresh_record", "no_grad",
    "grad_enabled", "backward", "gradient_check",
    "matmul", "add", "sub", "hadamard", "scale", "affine", "sigmoid", "tanh",
    "concat", "concat_columns", "take", "add_bias", "reshape", "stack", "index",
    "square", "sqrt", "sum", "mean", "elementwise",
]


class _Node:
    __slots__ = ("kind", "inputs", "output", "forward", "backward")

    def __init__(self, kind, inputs, output, forward, backward):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.forward = forward
        self.backward = backward


class ComputationRecord:
    """Append-only list of recorded operations."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def append(self, node: _Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def clear(self):
        for node in self.nodes:
            node.output._record = None
            node.output._index = None
        self.nodes = []

    def replay(self) -> bool:
        """Re-run every node forward from its inputs' current values.

        Returns True when every recomputed output is bit-identical to the
        stored one.
        """
        for node in self.nodes:
            again = node.forward(*[t.value for t in node.inputs])
            if again.shape != node.output.value.shape or not np.array_equal(again, node.output.value):
                return False
        return True


_local = threading.local()


def current_record() -> ComputationRecord:
    rec = getattr(_local, "record", None)
    if rec is None:
        rec = _local.record = ComputationRecord()
    return rec


def grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


@contextlib.contextmanager
def fresh_record():
    """Run the block against a new, empty record; restore the previous one after."""
    prev = getattr(_local, "record", None)
    rec = _local.record = ComputationRecord()
    try:
        yield rec
    finally:
        _local.record = prev


class Tensor:
    """A float64 array plus an optional accumulated gradient."""

    __slots__ = ("value", "grad", "requires_grad", "name", "_record", "_index")
    __array_priority__ = 100

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.array(value, dtype=DTYPE, order="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._record = None
        self._index = None

    @classmethod
    def _wrap(cls, value: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.value = value
        t.grad = None
        t.requires_grad = False
        t.name = None
        t._record = None
        t._index = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def node_id(self) -> int | None:
        return self._index

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else _raise_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar; all of these map onto the explicit ops below
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return affine(self, 1.0, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return affine(self, 1.0, -float(other))

    def __rsub__(self, other):
        return affine(self, -1.0, float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return hadamard(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _raise_scalar(t):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(kind: str, inputs: Sequence[Tensor], forward: Callable, backward: Callable) -> Tensor:
    out = Tensor._wrap(forward(*[t.value for t in inputs]))
    if grad_enabled() and any(t.requires_grad for t in inputs):
        rec = current_record()
        out.requires_grad = True
        out._record = rec
        out._index = rec.append(_Node(kind, tuple(inputs), out, forward, backward))
    return out


def _same_shape(kind, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise DimensionError(f"{kind}: shapes {a.shape} and {b.shape} differ")


# --------------------------------------------------------------------------
# primitive operations
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bwd(g, out, av, bv, needs):
        return (g @ bv.T if needs[0] else None, av.T @ g if needs[1] else None)

    return _emit("matmul", (a, b), np.matmul, bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", (a, b), np.add, lambda g, out, av, bv, needs: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", (a, b), np.subtract, lambda g, out, av, bv, needs: (g, -g if needs[1] else None))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("hadamard", a, b)

    def bwd(g, out, av, bv, needs):
        return (g * bv if needs[0] else None, g * av if needs[1] else None)

    return _emit("hadamard", (a, b), np.multiply, bwd)


def affine(a: Tensor, alpha: float, beta: float = 0.0) -> Tensor:
    """``alpha * a + beta`` with scalar constants."""
    alpha, beta = float(alpha), float(beta)
    if beta == 0.0:
        fwd = lambda av: alpha * av  # noqa: E731
    else:
        fwd = lambda av: alpha * av + beta  # noqa: E731
    return _emit("affine", (a,), fwd, lambda g, out, av, needs: (alpha * g,))


def scale(a: Tensor, c: float) -> Tensor:
    return affine(a, c, 0.0)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    return _emit("sigmoid", (a,), _sigmoid, lambda g, out, av, needs: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    return _emit("tanh", (a,), np.tanh, lambda g, out, av, needs: (g * (1.0 - out * out),))


def square(a: Tensor) -> Tensor:
    return _emit("square", (a,), np.square, lambda g, out, av, needs: (2.0 * g * av,))


def sqrt(a: Tensor) -> Tensor:
    def bwd(g, out, av, needs):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0.0, 0.5 / out, 0.0)
        return (g * d,)

    return _emit("sqrt", (a,), np.sqrt, bwd)


def sum(a: Tensor) -> Tensor:  # noqa: A001
    shape = a.shape
    return _emit("sum", (a,), lambda av: np.array(av.sum()),
                 lambda g, out, av, needs: (np.full(shape, float(g)),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _emit("mean", (a,), lambda av: np.array(av.sum() / n),
                 lambda g, out, av, needs: (np.full(shape, float(g) / n),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along the last axis; all leading dimensions must agree."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat: no operands")
    if axis not in (-1, tensors[0].value.ndim - 1):
        raise DimensionError("concat: only the last axis is supported")
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise DimensionError(f"concat: leading shapes {lead} and {t.shape[:-1]} differ")
    widths = [t.shape[-1] for t in tensors]
    bounds = np.cumsum([0] + widths)

    def fwd(*vals):
        return np.concatenate(vals, axis=-1)

    def bwd(g, out, *rest):
        needs = rest[-1]
        return tuple(g[..., bounds[i]:bounds[i + 1]] if needs[i] else None for i in range(len(widths)))

    return _emit("concat", tensors, fwd, bwd)


def concat_columns(*tensors: Tensor) -> Tensor:
    return concat(tensors, axis=-1)


def take(a: Tensor, start: int, stop: int) -> Tensor:
    """Columns ``start:stop`` of the last axis."""
    width = a.shape[-1]
    if not 0 <= start < stop <= width:
        raise DimensionError(f"take: bad column range [{start}, {stop}) for width {width}")
    shape = a.shape

    def bwd(g, out, av, needs):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return _emit("take", (a,), lambda av: np.ascontiguousarray(av[..., start:stop]), bwd)


def add_bias(a: Tensor, b: Tensor) -> Tensor:
    """Add a length-F vector to every row of ``a`` (last axis of size F)."""
    if b.value.ndim != 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: bias {b.shape} does not match last axis of {a.shape}")
    width = b.shape[0]

    def bwd(g, out, av, bv, needs):
        return (g, g.reshape(-1, width).sum(axis=0) if needs[1] else None)

    return _emit("add_bias", (a, b), np.add, bwd)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")
    old = a.shape
    return _emit("reshape", (a,), lambda av: av.reshape(shape),
                 lambda g, out, av, needs: (g.reshape(old),))


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equal-shaped tensors along a new leading axis."""
    tensors = [as_tensor(t) for t in tensors]
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise DimensionError(f"stack: shapes {shape} and {t.shape} differ")
    n = len(tensors)

    def bwd(g, out, *rest):
        needs = rest[-1]
        return tuple(g[i] if needs[i] else None for i in range(n))

    return _emit("stack", tensors, lambda *vals: np.stack(vals), bwd)


def index(a: Tensor, i: int) -> Tensor:
    """Slice ``a[i]`` along the leading axis."""
    shape = a.shape
    if not -shape[0] <= i < shape[0]:
        raise DimensionError(f"index: {i} out of range for leading axis {shape[0]}")

    def bwd(g, out, av, needs):
        full = np.zeros(shape)
        full[i] = g
        return (full,)

    return _emit("index", (a,), lambda av: np.array(av[i]), bwd)


_ELEMENTWISE = {
    "add": add,
    "hadamard": hadamard,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "scale": scale,
    "concat_columns": concat_columns,
}


def elementwise(kind: str, *operands):
    """Dispatch by name: ``elementwise("sigmoid", x)``, ``elementwise("scale", x, 2.0)``."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ContractError(f"unknown elementwise kind {kind!r}") from None
    return fn(*operands)


# --------------------------------------------------------------------------
# reverse pass
# --------------------------------------------------------------------------

def backward(loss: Tensor, retain: bool = False):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    The record that produced ``loss`` is cleared afterwards unless ``retain``.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    rec = loss._record
    if rec is None or not rec.nodes:
        raise ContractError("backward: loss was not produced by a recorded computation")
    grads: dict[int, np.ndarray] = {loss._index: np.ones_like(loss.value)}
    nodes = rec.nodes
    for idx in range(loss._index, -1, -1):
        g = grads.pop(idx, None)
        if g is None:
            continue
        node = nodes[idx]
        needs = tuple(t.requires_grad for t in node.inputs)
        in_grads = node.backward(g, node.output.value, *[t.value for t in node.inputs], needs)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t._record is rec and t._index is not None:
                prev = grads.get(t._index)
                grads[t._index] = gi if prev is None else prev + gi
            else:
                t.grad = np.array(gi, dtype=DTYPE) if t.grad is None else t.grad + gi
    if not retain:
        rec.clear()


def gradient_check(f: Callable[[], Tensor], params: Iterable[Tensor], step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error for one entry is ``|a - n| / max(1, |a|, |n|)``.
    """
    if not step > 0:
        raise ContractError("gradient_check: step must be positive")
    params = list(params)
    with no_grad():
        first = np.array(f().value)
        second = np.array(f().value)
    if first.size != 1:
        raise ContractError("gradient_check: f must return a scalar")
    if not np.array_equal(first, second):
        raise DeterminismError("gradient_check: two forward passes of f disagree")

    for p in params:
        p.zero_grad()
    with fresh_record():
        backward(f())
    analytic = [np.zeros_like(p.value) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            for pos in np.ndindex(p.shape):
                orig = p.value[pos]
                p.value[pos] = orig + step
                fp = float(f().value)
                p.value[pos] = orig - step
                fm = float(f().value)
                p.value[pos] = orig
                num = (fp - fm) / (2.0 * step)
                err = abs(a[pos] - num) / max(1.0, abs(a[pos]), abs(num))
                worst = max(worst, err)
    return worst
