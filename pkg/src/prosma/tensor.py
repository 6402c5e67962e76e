"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation returns a new :class:`Tensor` holding a
reference to its inputs and a backward rule.  :func:`backward` linearises the
reachable graph into a :class:`GradTape` (reverse topological order) and
replays it once.  A graph can be replayed only once; run the forward pass
again to get fresh gradients.

Binary operations follow numpy broadcasting with one extra alignment rule:
when a 4-D ``[N, C, H, W]`` operand meets a 1-D ``[C]`` or 2-D ``[N, C]``
operand, the smaller one is aligned to the leading (batch/channel) axes
rather than the trailing ones.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

DTYPE = np.float64

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def record_kinks():
    """Collect the active-set masks of piecewise-linear ops run in this block.

    Used by gradient checks to detect finite-difference probes that cross a
    kink (ReLU at 0, soft-threshold at +-lambda, max-pool ties).
    """
    prev = getattr(_state, "kinks", None)
    log: list[np.ndarray] = []
    _state.kinks = log
    try:
        yield log
    finally:
        _state.kinks = prev


def log_kink(pattern: np.ndarray) -> None:
    log = getattr(_state, "kinks", None)
    if log is not None:
        log.append(pattern)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = ""
        self._consumed = False

    # -- basic properties ---------------------------------------------------
    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got dims {self.dims}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", op={self._op}" if self._op else ""
        return f"Tensor(dims={self.dims}, requires_grad={self.requires_grad}{tag})"

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *dims):
        if len(dims) == 1 and isinstance(dims[0], (tuple, list)):
            dims = tuple(dims[0])
        return reshape(self, dims)

    def backward(self) -> None:
        backward(self)


# -- construction -------------------------------------------------------------


def _check_dims(dims: Sequence[int]) -> tuple[int, ...]:
    dims = tuple(int(d) for d in dims)
    if not dims or any(d < 1 for d in dims):
        raise ShapeError(f"dims must be non-empty with extents >= 1, got {list(dims)}")
    return dims


def zeros(dims: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(_check_dims(dims), dtype=DTYPE), requires_grad)


def full(dims: Sequence[int], fill: float, requires_grad: bool = False) -> Tensor:
    return Tensor(np.full(_check_dims(dims), fill, dtype=DTYPE), requires_grad)


def from_values(dims: Sequence[int], values: Iterable[float], requires_grad: bool = False) -> Tensor:
    dims = _check_dims(dims)
    flat = np.asarray(list(values) if not isinstance(values, np.ndarray) else values, dtype=DTYPE).ravel()
    if flat.size != int(np.prod(dims)):
        raise ShapeError(f"{flat.size} values cannot fill dims {list(dims)}")
    return Tensor(flat.reshape(dims).copy(), requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- graph plumbing ----------------------------------------------------------


def _node(data: np.ndarray, parents: tuple[Tensor, ...], rule: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = rule
        out._op = op
    return out


@dataclass
class GradTape:
    """Recorded op nodes of one graph in forward (topological) order."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, root: Tensor) -> GradTape:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in t._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def replay(self, root: Tensor) -> None:
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        for t in reversed(self.nodes):
            g = grads.pop(id(t), None)
            if g is None:
                g = np.zeros_like(t.data)
            if t.is_leaf:
                t.grad = g if t.grad is None else t.grad + g
                continue
            t.grad = g
            for p, pg in zip(t._parents, t._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg
            t._backward = None
            t._consumed = True


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got dims {loss.dims}")
    if loss._consumed:
        raise ContractError("backward() already ran on this graph; rebuild the forward pass")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    tape = GradTape.from_output(loss)
    if any(t._consumed for t in tape.nodes):
        raise ContractError("graph was partially consumed by an earlier backward()")
    tape.replay(loss)


# -- broadcasting --------------------------------------------------------------


def _aligned(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if a.ndim == 4 and b.ndim in (1, 2) and b.size > 1:
        b = b.reshape(b.shape + (1,) * (4 - b.ndim)) if b.ndim == 2 else b.reshape(1, -1, 1, 1)
    elif b.ndim == 4 and a.ndim in (1, 2) and a.size > 1:
        a = a.reshape(a.shape + (1,) * (4 - a.ndim)) if a.ndim == 2 else a.reshape(1, -1, 1, 1)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast dims {list(a.shape)} with {list(b.shape)}") from None
    return a, b


def _unbroadcast(g: np.ndarray, aligned_shape: tuple[int, ...], orig_shape: tuple[int, ...]) -> np.ndarray:
    if g.shape != aligned_shape:
        extra = g.ndim - len(aligned_shape)
        if extra:
            g = g.sum(axis=tuple(range(extra)))
        axes = tuple(i for i, n in enumerate(aligned_shape) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
    return g.reshape(orig_shape)


def _binary(a, b, fwd, grad_a, grad_b, op):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = _aligned(a.data, b.data)
    out = fwd(ad, bd)

    def rule(g):
        ga = _unbroadcast(grad_a(g, ad, bd, out), ad.shape, a.shape) if a.requires_grad else None
        gb = _unbroadcast(grad_b(g, ad, bd, out), bd.shape, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), rule, op)


def add(a, b) -> Tensor:
    return _binary(a, b, np.add, lambda g, *_: g, lambda g, *_: g, "add")


def sub(a, b) -> Tensor:
    return _binary(a, b, np.subtract, lambda g, *_: g, lambda g, *_: -g, "sub")


def mul(a, b) -> Tensor:
    return _binary(a, b, np.multiply, lambda g, x, y, o: g * y, lambda g, x, y, o: g * x, "mul")


def div(a, b) -> Tensor:
    return _binary(
        a, b, np.divide,
        lambda g, x, y, o: g / y,
        lambda g, x, y, o: -g * o / y,
        "div",
    )


# -- unary ---------------------------------------------------------------------


def _unary(a, out: np.ndarray, local_grad: Callable[[], np.ndarray], op: str) -> Tensor:
    a = as_tensor(a)
    return _node(out, (a,), lambda g: (g * local_grad(),), op)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    log_kink(mask)
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _softplus_np(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid_np(a.data)
    return _unary(a, s, lambda: s * (1.0 - s), "sigmoid")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return _unary(a, _softplus_np(a.data), lambda: _sigmoid_np(a.data), "softplus")


def sign(a) -> Tensor:
    a = as_tensor(a)
    return _unary(a, np.sign(a.data), lambda: np.zeros_like(a.data), "sign")


def tabs(a) -> Tensor:
    a = as_tensor(a)
    return _unary(a, np.abs(a.data), lambda: np.sign(a.data), "abs")


def maximum(a, scalar: float) -> Tensor:
    """Elementwise ``max(a, scalar)``; ties route no gradient."""
    a = as_tensor(a)
    mask = a.data > scalar
    log_kink(mask)
    return _node(np.where(mask, a.data, scalar), (a,), lambda g: (g * mask,), "maximum")


def exp(a) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.data)
    return _unary(a, e, lambda: e, "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _unary(a, np.log(a.data), lambda: 1.0 / a.data, "log")


# -- reductions and shape ops --------------------------------------------------------


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis)

    def rule(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(out, dtype=DTYPE), (a,), rule, "sum")


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return mul(tsum(a, axis), 1.0 / n)


def reshape(a, dims) -> Tensor:
    a = as_tensor(a)
    dims = tuple(dims)
    try:
        out = a.data.reshape(dims)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.dims} to {list(dims)}") from None
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got dims {a.dims}")
    return _node(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs [M,K]x[K,P], got {a.dims} x {b.dims}")
    out = a.data @ b.data

    def rule(g):
        return (g @ b.data.T if a.requires_grad else None, a.data.T @ g if b.requires_grad else None)

    return _node(out, (a, b), rule, "matmul")
