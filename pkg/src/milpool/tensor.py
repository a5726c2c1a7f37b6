"""Dense reverse-mode automatic differentiation on numpy arrays.

A :class:`Tensor` wraps a float64 array. Operations in this module return new
tensors that remember their inputs and a backward rule; :func:`backward`
walks that graph once in reverse topological order and accumulates gradients
into the leaves.

Broadcasting is deliberately absent: binary ops need equal shapes, the only
exceptions being multiplication by a python scalar (``scale``) and the
row-vector bias of a dense layer (``add_bias``).
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

from .errors import DimensionError, DomainError, NumericError, ParameterError
from .rng import as_generator

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph (evaluation, validation)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "op", "parents", "_backward")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.array(values, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = None
        self.parents = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def is_leaf(self) -> bool:
        return self.op is None

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        if self.values.size != 1:
            raise DimensionError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values, parents, op, backward) -> Tensor:
    out = Tensor(values)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out.parents = tuple(parents)
        out._backward = backward
    return out


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.values, b.values

    def backward(g):
        return g @ bv.T, av.T @ g

    return _make(av @ bv, (a, b), "matmul", backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("add", a, b)
    return _make(a.values + b.values, (a, b), "add", lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("sub", a, b)
    return _make(a.values - b.values, (a, b), "sub", lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("mul", a, b)
    av, bv = a.values, b.values
    return _make(av * bv, (a, b), "mul", lambda g: (g * bv, g * av))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.values * c, (x,), "scale", lambda g: (g * c,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-wise bias: ``x[r, c] + b[c]`` for a 2-D ``x``."""
    if x.values.ndim != 2 or b.shape != (x.shape[1],):
        raise DimensionError(f"add_bias: bias {b.shape} does not fit rows of {x.shape}")
    return _make(x.values + b.values, (x, b), "add_bias", lambda g: (g, g.sum(axis=0)))


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0
    return _make(np.where(mask, x.values, 0.0), (x,), "relu", lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.values))
    return _make(s, (x,), "sigmoid", lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.values)
    return _make(t, (x,), "tanh", lambda g: (g * (1.0 - t * t),))


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.values)
    return _make(e, (x,), "exp", lambda g: (g * e,))


def log(x: Tensor) -> Tensor:
    xv = x.values
    if np.any(~(xv > 0)):
        raise DomainError("log: input has non-positive entries")
    return _make(np.log(xv), (x,), "log", lambda g: (g / xv,))


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    sign = np.sign(x.values)
    return _make(np.abs(x.values), (x,), "abs", lambda g: (g * sign,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient is zero where clamping was active."""
    inside = (x.values >= lo) & (x.values <= hi)
    return _make(np.clip(x.values, lo, hi), (x,), "clip", lambda g: (g * inside,))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.values.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return _make(out, (x,), "reshape", lambda g: (g.reshape(old),))


def sum(x: Tensor) -> Tensor:  # noqa: A001
    shape = x.shape
    return _make(np.array(x.values.sum()), (x,), "sum", lambda g: (np.full(shape, float(g)),))


def softmax_rows(x: Tensor) -> Tensor:
    xv = x.values
    if xv.ndim != 2:
        raise DimensionError(f"softmax_rows: expected a matrix, got shape {xv.shape}")
    if not np.all(np.isfinite(xv)):
        raise NumericError("softmax_rows: non-finite input")
    e = np.exp(xv - xv.max(axis=1, keepdims=True))
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _make(s, (x,), "softmax_rows", backward)


def dropout(x: Tensor, p: float, mode: str = "train", rng=None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-p)`` at train time."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    if mode == "eval" or p == 0.0:
        return x
    if mode != "train":
        raise ParameterError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    if rng is None:
        raise ParameterError("dropout in train mode needs a random stream")
    keep = as_generator(rng).random(x.shape) >= p
    mask = keep / (1.0 - p)
    return _make(x.values * mask, (x,), "dropout", lambda g: (g * mask,))


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    pending = {id(loss): np.ones(loss.shape)}
    for node in reversed(_topological(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            if id(parent) in pending:
                pending[id(parent)] = pending[id(parent)] + pg
            else:
                pending[id(parent)] = pg
