"""Dense float64 tensors with taped reverse-mode differentiation.

Every operation records its inputs and a backward rule while gradients are
enabled, so calling :meth:`Tensor.backward` on a scalar result accumulates
gradients into every reachable leaf. Values are plain numpy arrays in double
precision; determinism is guaranteed given the same inputs (and the same
``numpy.random.Generator`` for dropout).

The finite-difference checker :func:`grad_check` is deliberately independent
of the tape: it re-evaluates the function under :func:`no_grad` with central
differences and never reuses recorded gradients.
"""

from __future__ import annotations

import contextlib
import math
import os
import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "set_finite_checks",
    "parameter",
    "constant",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "concat",
    "broadcast_to",
    "reshape",
    "transpose",
    "softmax",
    "layer_norm",
    "dropout",
    "tsum",
    "tmean",
    "tmax",
    "tsin",
    "tcos",
    "gelu",
    "topo_order",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operation."""


_state = threading.local()

# Per-op finite checks are O(size) per result, so they are opt-in; published
# boundaries (model outputs, losses) always validate explicitly.
_finite_checks = os.environ.get("MOTIONCOMPOSE_CHECK_FINITE", "") == "1"


def set_finite_checks(enabled: bool) -> None:
    global _finite_checks
    _finite_checks = bool(enabled)


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (forward values only)."""
    previous = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """A float64 array plus an optional position on the autodiff tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if _finite_checks and not np.all(np.isfinite(arr)):
            raise FloatingPointError("tensor initialised with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # -- operator sugar -------------------------------------------------
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor) or np.ndim(other) != 0:
            raise TypeError("tensor division is only supported by scalars")
        return mul(self, 1.0 / float(other))

    # -- autodiff -------------------------------------------------------
    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable leaf."""
        if self.size != 1:
            raise ValueError(
                f"backward requires a scalar output, got shape {self.shape}"
            )
        order = topo_order(self)
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            for parent, contribution in zip(node._parents, node._backward(node.grad)):
                if contribution is None:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += contribution

    def grad_or_zero(self) -> np.ndarray:
        """Gradient of the last backward pass; zeros when unreachable."""
        if self.grad is None:
            return np.zeros_like(self.data)
        return self.grad


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def constant(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=False, name=name)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    if _finite_checks and not np.all(np.isfinite(data)):
        raise FloatingPointError("operation produced non-finite values")
    requires = _grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = requires
    out.grad = None
    out.name = None
    if requires:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def topo_order(root: Tensor) -> list[Tensor]:
    """Nodes of the recorded graph, every input before its consumers."""
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


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(
            f"{op}: shapes {a.shape} and {b.shape} do not broadcast"
        ) from None


# -- elementwise ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        )

    return _make(a.data * b.data, (a, b), backward)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def tsin(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def tcos(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(a) -> Tensor:
    """Smooth GELU activation (tanh form)."""
    a = _as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
        grad = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
        return (g * grad,)

    return _make(y, (a,), backward)


# -- structural ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires 2d+ operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}"
        )
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(
            f"matmul: batch dimensions of {a.shape} and {b.shape} do not broadcast"
        ) from None

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat of an empty sequence")
    base = list(ts[0].shape)
    ax = axis % len(base)
    for t in ts[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
            o != b for i, (o, b) in enumerate(zip(other, base)) if i != ax
        ):
            raise ShapeError(
                f"concat: shapes {ts[0].shape} and {t.shape} differ off axis {axis}"
            )
    sizes = [t.shape[ax] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=ax)
            for i in range(len(ts))
        )

    return _make(np.concatenate([t.data for t in ts], axis=ax), tuple(ts), backward)


def broadcast_to(a, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    try:
        data = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"cannot broadcast {a.shape} to {shape}") from None
    return _make(data, (a,), lambda g: (_unbroadcast(g, a.shape),))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    inverse = tuple(np.argsort(axes))
    return _make(
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (g.transpose(inverse),),
    )


# -- normalisation and attention helpers ---------------------------------

def softmax(a) -> Tensor:
    """Softmax over the last axis; rows sum to one."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - inner),)

    return _make(y, (a,), backward)


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean, unit variance (no affine)."""
    a = _as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    centred = a.data - mu
    var = (centred * centred).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = centred * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return _make(y, (a,), backward)


def dropout(a, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; train-time only, sampling paths never call this."""
    a = _as_tensor(a)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return _make(a.data.copy(), (a,), lambda g: (g,))
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return _make(a.data * keep, (a,), lambda g: (g * keep,))


# -- scalar reductions ----------------------------------------------------

def tsum(a) -> Tensor:
    a = _as_tensor(a)
    return _make(
        np.asarray(a.data.sum()),
        (a,),
        lambda g: (np.broadcast_to(g, a.shape).copy(),),
    )


def tmean(a) -> Tensor:
    a = _as_tensor(a)
    scale = 1.0 / a.size
    return _make(
        np.asarray(a.data.mean()),
        (a,),
        lambda g: (np.broadcast_to(g * scale, a.shape).copy(),),
    )


def tmax(a) -> Tensor:
    """Scalar max; the subgradient flows to the first maximal entry."""
    a = _as_tensor(a)
    flat_index = int(np.argmax(a.data))

    def backward(g):
        out = np.zeros_like(a.data)
        out.flat[flat_index] = g
        return (out,)

    return _make(np.asarray(a.data.max()), (a,), backward)


# -- gradient checking -----------------------------------------------------

def grad_check(
    f: Callable[[Tensor], Tensor],
    x,
    eps: float = 1e-6,
) -> float:
    """Max relative error between taped gradients and central differences.

    The denominator is ``max(1, |finite difference|)`` per entry, so the
    result is meaningful for both tiny and large gradients. Raises if ``f``
    returns a non-scalar, or evaluates to a non-finite value at a perturbed
    point.
    """
    if not 0.0 < eps <= 1e-3:
        raise ValueError(f"eps must lie in (0, 1e-3], got {eps}")
    base = np.array(x, dtype=np.float64)
    leaf = Tensor(base.copy(), requires_grad=True)
    out = f(leaf)
    if not isinstance(out, Tensor) or out.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    out.backward()
    analytic = leaf.grad_or_zero().reshape(-1)

    work = base.copy()
    flat = work.reshape(-1)
    numeric = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            hi = float(f(Tensor(work)).data)
            flat[i] = original - eps
            lo = float(f(Tensor(work)).data)
            flat[i] = original
            if not (math.isfinite(hi) and math.isfinite(lo)):
                raise FloatingPointError(
                    f"function returned non-finite value at perturbed entry {i}"
                )
            numeric[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(1.0, np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
