"""Dense tensors with tape-based reverse-mode automatic differentiation.

Values live in numpy arrays, float64 by default (float32 is the usual choice
for training runs). Each differentiable op records its parents and a closure
that maps the incoming gradient to per-parent gradients; ``backward()`` on a
scalar walks the tape in reverse topological order. The graph of one loss is
released as soon as the loss tensor goes out of scope, so training loops stay
step-local in memory.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from ..errors import ContractError, ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape construction inside the block (evaluation-only passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum out broadcast dimensions so ``grad`` matches ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A node in the differentiation graph wrapping an ndarray."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn = None

    # -- bookkeeping ---------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- backward pass -------------------------------------------------------

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every requires_grad ancestor.

        Repeated calls without zeroing keep accumulating.
        """
        if self.data.size != 1:
            raise ContractError(
                f"backward() requires a scalar loss, got shape {self.data.shape}"
            )
        if not self.requires_grad:
            return
        order = _topo_order(self)
        working: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = working.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            fn = node._grad_fn
            if fn is None:
                continue
            for parent, pg in zip(node._parents, fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                held = working.get(key)
                working[key] = pg if held is None else held + pg

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        need_a, need_b = self.requires_grad, other.requires_grad

        def grad_fn(g):
            return (
                _unbroadcast(g, a.shape) if need_a else None,
                _unbroadcast(g, b.shape) if need_b else None,
            )

        return _from_op(a + b, (self, other), grad_fn)

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        need_a, need_b = self.requires_grad, other.requires_grad

        def grad_fn(g):
            return (
                _unbroadcast(g, a.shape) if need_a else None,
                _unbroadcast(-g, b.shape) if need_b else None,
            )

        return _from_op(a - b, (self, other), grad_fn)

    def __rsub__(self, other):
        return as_tensor(other).__sub__(self)

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        need_a, need_b = self.requires_grad, other.requires_grad

        def grad_fn(g):
            return (
                _unbroadcast(g * b, a.shape) if need_a else None,
                _unbroadcast(g * a, b.shape) if need_b else None,
            )

        return _from_op(a * b, (self, other), grad_fn)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        need_a, need_b = self.requires_grad, other.requires_grad

        def grad_fn(g):
            return (
                _unbroadcast(g / b, a.shape) if need_a else None,
                _unbroadcast(-g * a / (b * b), b.shape) if need_b else None,
            )

        return _from_op(a / b, (self, other), grad_fn)

    def __rtruediv__(self, other):
        return as_tensor(other).__truediv__(self)

    def __neg__(self):
        return _from_op(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise ContractError("only constant exponents are differentiable here")
        a = self.data
        out = a**exponent

        def grad_fn(g):
            return (g * exponent * a ** (exponent - 1),)

        return _from_op(out, (self,), grad_fn)

    def matmul(self, other: "Tensor") -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim != 2:
            raise ShapeError(f"matmul expects 2-D operands, got {a.shape} x {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
        need_a, need_b = self.requires_grad, other.requires_grad

        def grad_fn(g):
            return (
                g @ b.T if need_a else None,
                a.T @ g if need_b else None,
            )

        return _from_op(a @ b, (self, other), grad_fn)

    __matmul__ = matmul

    # -- elementwise nonlinearities -------------------------------------------

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return _from_op(out, (self,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        a = self.data
        return _from_op(np.log(a), (self,), lambda g: (g / a,))

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return _from_op(out, (self,), lambda g: (g * 0.5 / out,))

    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)
        return _from_op(out, (self,), lambda g: (g * (1.0 - out * out),))

    def relu(self) -> "Tensor":
        a = self.data
        out = np.maximum(a, 0.0)
        return _from_op(out, (self,), lambda g: (g * (a > 0),))

    def sigmoid(self) -> "Tensor":
        out = _sigmoid(self.data)
        return _from_op(out, (self,), lambda g: (g * out * (1.0 - out),))

    def softplus(self) -> "Tensor":
        # log(1 + e^x) in the overflow-free split form
        a = self.data
        e = np.exp(-np.abs(a))
        out = np.maximum(a, 0.0) + np.log1p(e)

        def grad_fn(g):
            sig = np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
            return (g * sig,)

        return _from_op(out, (self,), grad_fn)

    def clip(self, min_value=None, max_value=None) -> "Tensor":
        """Clamp values; gradient passes through wherever no clamping happened."""
        a = self.data
        out = np.clip(a, min_value, max_value)
        inside = np.ones(a.shape, dtype=bool)
        if min_value is not None:
            inside &= a >= min_value
        if max_value is not None:
            inside &= a <= max_value

        def grad_fn(g):
            return (g * inside,)

        return _from_op(out, (self,), grad_fn)

    # -- reductions -----------------------------------------------------------

    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        a = self.data
        out = a.sum(axis=axis, keepdims=keepdims)

        def grad_fn(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape),)

        return _from_op(out, (self,), grad_fn)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        a = self.data
        count = a.size if axis is None else a.shape[axis]
        out = a.mean(axis=axis, keepdims=keepdims)

        def grad_fn(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape) / count,)

        return _from_op(out, (self,), grad_fn)

    def logsumexp(self, axis: int, keepdims: bool = False) -> "Tensor":
        """log(sum(exp(x))) along ``axis`` via a max shift; gradient is softmax."""
        a = self.data
        m = np.max(a, axis=axis, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        shifted = np.exp(a - m)
        total = shifted.sum(axis=axis, keepdims=True)
        out = m + np.log(total)
        if not keepdims:
            out = np.squeeze(out, axis=axis)

        def grad_fn(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (g * (shifted / total),)

        return _from_op(out, (self,), grad_fn)

    # -- shape manipulation -----------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self.data
        return _from_op(a.reshape(shape), (self,), lambda g: (g.reshape(a.shape),))

    def broadcast_to(self, shape) -> "Tensor":
        a = self.data
        return _from_op(np.broadcast_to(a, shape), (self,),
                        lambda g: (_unbroadcast(g, a.shape),))

    def transpose(self, axes: tuple[int, ...] | None = None) -> "Tensor":
        a = self.data
        out = np.transpose(a, axes)
        inv = None if axes is None else tuple(np.argsort(axes))

        def grad_fn(g):
            return (np.transpose(g, inv),)

        return _from_op(out, (self,), grad_fn)

    def __getitem__(self, idx) -> "Tensor":
        a = self.data

        def grad_fn(g):
            full = np.zeros_like(a)
            np.add.at(full, idx, g)
            return (full,)

        return _from_op(a[idx], (self,), grad_fn)


def _sigmoid(a: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(a))
    return np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _topo_order(root: Tensor) -> list[Tensor]:
    """Iterative postorder over the tape; ancestors come before descendants."""
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
    return order


def _from_op(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
    return out


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    datas = [t.data for t in tensors]
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _from_op(np.concatenate(datas, axis=axis), tuple(tensors), grad_fn)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = axis if axis >= 0 else x.ndim + axis
    return x - x.logsumexp(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return log_softmax(x, axis=axis).exp()


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


# -- seeded parameter initialization -------------------------------------------


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float64) -> np.ndarray:
    """Uniform init scaled by sqrt(6 / (fan_in + fan_out))."""
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def normal_init(rng: np.random.Generator, shape, std: float = 1.0, dtype=np.float64) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(dtype)


def uniform_init(rng: np.random.Generator, shape, low: float = 0.0, high: float = 1.0, dtype=np.float64) -> np.ndarray:
    return rng.uniform(low, high, size=shape).astype(dtype)
