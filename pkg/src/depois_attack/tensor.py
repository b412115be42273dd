"""Minimal reverse-mode automatic differentiation on dense float64 arrays.

A :class:`Tensor` records the operation that produced it together with a
closure mapping the output gradient to gradients of its parents.  Calling
:meth:`Tensor.backward` on a scalar walks the graph in reverse topological
order and accumulates ``grad`` on every tensor that ``requires_grad``.

Only the operations needed by feed-forward networks and their losses are
provided.  Every operation checks its output for NaN/Inf and raises
:class:`~depois_attack.errors.NonFiniteError` instead of propagating them.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, NonFiniteError, ShapeError


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value produced by {op}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """Shape-carrying array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")
    # make ``ndarray <op> Tensor`` dispatch to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, _parents=(), _op: str = ""):
        arr = _as_array(data)
        if arr.ndim > 0 and 0 in arr.shape:
            raise ShapeError("tensor dimensions must be positive")
        _check_finite(arr, _op or "construction")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = _op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'!r})"

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _make(data, parents: Iterable[Tensor], backward, op: str) -> Tensor:
        parents = tuple(parents)
        out = Tensor(data, any(p.requires_grad for p in parents), parents, op)
        if out.requires_grad:
            out._backward = backward
        return out

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable ``leaf.grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        grad = _as_array(grad)
        if grad.shape != self.shape:
            raise ShapeError(f"seed gradient shape {grad.shape} != {self.shape}")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                _check_finite(pg, f"backward of {node._op}")
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other) -> Tensor:
        other = ensure_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
            "add",
        )

    __radd__ = __add__

    def __sub__(self, other) -> Tensor:
        other = ensure_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), -_unbroadcast(g, b_shape)),
            "sub",
        )

    def __rsub__(self, other) -> Tensor:
        return ensure_tensor(other) - self

    def __neg__(self) -> Tensor:
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __mul__(self, other) -> Tensor:
        other = ensure_tensor(other)
        a, b = self.data, other.data
        return Tensor._make(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
            "mul",
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        other = ensure_tensor(other)
        a, b = self.data, other.data
        return Tensor._make(
            a / b,
            (self, other),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)),
            "div",
        )

    def __matmul__(self, other) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, index) -> Tensor:
        shape = self.shape

        def back(g):
            full = np.zeros(shape)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._make(self.data[index], (self,), back, "getitem")

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        count = self.data.size if axis is None else self.data.shape[axis]
        return tensor_sum(self, axis, keepdims) * (1.0 / count)

    def reshape(self, *shape) -> Tensor:
        old = self.shape
        return Tensor._make(
            self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),), "reshape"
        )


def ensure_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = ensure_tensor(a), ensure_tensor(b)
    if a.ndim not in (1, 2) or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def back(g):
        if A.ndim == 1:
            return g @ B.T, np.outer(A, g)
        return g @ B.T, A.T @ g

    return Tensor._make(A @ B, (a, b), back, "matmul")


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(x.data.sum(axis=axis, keepdims=keepdims), (x,), back, "sum")


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [ensure_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    return Tensor._make(
        np.concatenate([p.data for p in parts], axis=axis),
        parts,
        lambda g: tuple(np.split(g, splits, axis=axis)),
        "concat",
    )


# -- elementwise nonlinearities --------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(x.data > 0, 1.0, slope)
    return Tensor._make(x.data * factor, (x,), lambda g: (g * factor,), "leaky_relu")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so large |x| never overflows exp
    d = x.data
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return Tensor._make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return Tensor._make(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


def identity(x: Tensor) -> Tensor:
    return x


def square(x: Tensor) -> Tensor:
    d = x.data
    return Tensor._make(d * d, (x,), lambda g: (2.0 * g * d,), "square")


def log(x: Tensor) -> Tensor:
    d = x.data
    if np.any(d <= 0):
        raise NonFiniteError("log of non-positive value")
    return Tensor._make(np.log(d), (x,), lambda g: (g / d,), "log")


def clamp_min(x: Tensor, floor: float) -> Tensor:
    mask = x.data >= floor
    return Tensor._make(np.maximum(x.data, floor), (x,), lambda g: (g * mask,), "clamp_min")


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": relu,
    "leaky_relu": leaky_relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "identity": identity,
}


# -- softmax family -----------------------------------------------------------


def log_softmax(x: Tensor, temperature: float = 1.0) -> Tensor:
    """Row-wise ``log softmax(x / T)`` over the last axis."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    z = x.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def back(g):
        return ((g - soft * g.sum(axis=-1, keepdims=True)) / temperature,)

    return Tensor._make(out, (x,), back, "log_softmax")


def softmax(x: Tensor, temperature: float = 1.0) -> Tensor:
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    z = x.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)) / temperature,)

    return Tensor._make(s, (x,), back, "softmax")
