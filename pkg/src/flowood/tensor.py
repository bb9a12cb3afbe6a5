"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation records its operands and a closure mapping
the output gradient to operand gradients. ``backward`` walks the recorded
graph in reverse topological order and accumulates gradients on leaves.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes cannot be combined."""


_grad_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording for the current thread."""
    prev = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


class Tensor:
    """An n-dimensional float64 array that can take part in a compute graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
        out = cls.__new__(cls)
        out.data = data if data.dtype == np.float64 else data.astype(np.float64)
        out.grad = None
        out.name = None
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = parents if track else ()
        out._backward = backward if track else None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- autodiff -------------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators ------------------------------------------------------------

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
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self) -> Tensor:
        return exp(self)

    def log(self) -> Tensor:
        return log(self)

    def tanh(self) -> Tensor:
        return tanh(self)

    def relu(self) -> Tensor:
        return relu(self)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- broadcasting --------------------------------------------------------------


def _align(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # a rank-1 operand against a rank-4 image tensor is a per-channel vector
    if a.ndim == 4 and b.ndim == 1 and b.shape[0] == a.shape[1] and b.shape[0] != 1:
        b = b.reshape(1, -1, 1, 1)
    elif b.ndim == 4 and a.ndim == 1 and a.shape[0] == b.shape[1] and a.shape[0] != 1:
        a = a.reshape(1, -1, 1, 1)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None
    return a, b


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if len(shape) == 1 and grad.ndim == 4 and grad.shape[1] == shape[0] and shape[0] != 1:
        return grad.sum(axis=(0, 2, 3))
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad.reshape(shape)


# -- elementwise binary ----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    x, y = _align(a.data, b.data)
    return Tensor._from_op(
        x + y, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    x, y = _align(a.data, b.data)
    return Tensor._from_op(
        x - y, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    x, y = _align(a.data, b.data)
    return Tensor._from_op(
        x * y, (a, b), lambda g: (_unbroadcast(g * y, a.shape), _unbroadcast(g * x, b.shape))
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    x, y = _align(a.data, b.data)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = x / y

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return _unbroadcast(g / y, a.shape), _unbroadcast(-g * x / (y * y), b.shape)

    return Tensor._from_op(out, (a, b), backward)


_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise_binary(a, b, kind: str) -> Tensor:
    """Apply one of ``add``, ``sub``, ``mul``, ``div`` with broadcasting."""
    try:
        op = _BINARY[kind]
    except KeyError:
        raise ValueError(f"unknown binary op {kind!r}") from None
    return op(a, b)


# -- elementwise unary ---------------------------------------------------------------


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return Tensor._from_op(x**exponent, (a,), lambda g: (g * exponent * x ** (exponent - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x)
    return Tensor._from_op(out, (a,), lambda g: (g / x,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor._from_op(a.data * mask, (a,), lambda g: (g * mask,))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.logaddexp(0.0, x)
    return Tensor._from_op(out, (a,), lambda g: (g / (1.0 + np.exp(-x)),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    with np.errstate(divide="ignore"):
        return Tensor._from_op(out, (a,), lambda g: (g * 0.5 / out,))


def tabs(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._from_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


# -- reductions ----------------------------------------------------------------------


def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    shape = a.shape
    return Tensor._from_op(
        np.asarray(out), (a,), lambda g: (_expand_reduced(g, shape, axis, keepdims).copy(),)
    )


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.size // max(np.asarray(out).size, 1)
    shape = a.shape
    return Tensor._from_op(
        np.asarray(out),
        (a,),
        lambda g: (_expand_reduced(g, shape, axis, keepdims) / count,),
    )


def channel_mean(x) -> Tensor:
    """Per-channel mean of an NCHW tensor over batch and spatial axes."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"channel reductions need NCHW input, got rank {x.ndim}")
    return tmean(x, axis=(0, 2, 3))


def channel_std(x) -> Tensor:
    """Per-channel population standard deviation of an NCHW tensor."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"channel reductions need NCHW input, got rank {x.ndim}")
    mu = tmean(x, axis=(0, 2, 3), keepdims=True)
    var = tmean((x - mu) ** 2, axis=(0, 2, 3))
    return sqrt(var)


def reduce(x, kind: str) -> Tensor:
    if kind == "sum":
        return tsum(x)
    if kind == "mean":
        return tmean(x)
    if kind == "channel_mean":
        return channel_mean(x)
    if kind == "channel_std":
        return channel_std(x)
    raise ValueError(f"unknown reduction {kind!r}")


# -- shape manipulation ------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._from_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (slice, int)) or i is Ellipsis or i is None for i in parts)

    def backward(g):
        out = np.zeros(shape)
        if basic:
            out[index] += g
        else:
            np.add.at(out, index, g)
        return (out,)

    return Tensor._from_op(np.asarray(a.data[index]), (a,), backward)


def take(a, indices, axis: int) -> Tensor:
    """Gather ``indices`` along ``axis``."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        idx = [slice(None)] * len(shape)
        idx[axis] = indices
        np.add.at(out, tuple(idx), g)
        return (out,)

    return Tensor._from_op(np.take(a.data, indices, axis=axis), (a,), backward)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Tensor._from_op(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), backward)


# -- linear algebra / convolution ---------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    x, y = a.data, b.data
    if x.ndim != 2 or y.ndim != 2:
        raise ShapeError("matmul supports rank-2 operands only")
    if x.shape[1] != y.shape[0]:
        raise ShapeError(f"matmul shape mismatch {x.shape} @ {y.shape}")
    return Tensor._from_op(x @ y, (a, b), lambda g: (g @ y.T, x.T @ g))


def _correlate(x: np.ndarray, k: np.ndarray, padding: int) -> np.ndarray:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    kh, kw = k.shape[2], k.shape[3]
    if kh == 1 and kw == 1:
        return np.einsum("oc,nchw->nohw", k[:, :, 0, 0], x, optimize=True)
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # N,C,H',W',kh,kw
    out = np.tensordot(win, k, axes=([1, 4, 5], [1, 2, 3]))  # N,H',W',O
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d(x, kernel, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation of NCHW input with an OIHW kernel."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError("conv2d expects NCHW input and OIHW kernel")
    n, c, h, w = x.shape
    o, i, kh, kw = kernel.shape
    if c != i:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernel expects {i}")
    if kh % 2 == 0 or kh != kw:
        raise ShapeError("conv2d kernels must be square with odd extent")
    xd, kd = x.data, kernel.data
    out = _correlate(xd, kd, padding)

    def backward(g):
        flipped = np.ascontiguousarray(kd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gx = _correlate(g, flipped, kh - 1 - padding) if padding <= kh - 1 else None
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
        if kh == 1 and kw == 1:
            gk = np.einsum("nohw,nchw->oc", g, xp, optimize=True)[:, :, None, None]
        else:
            win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
            gk = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # O,C,kh,kw
        return gx, gk

    return Tensor._from_op(out, (x, kernel), backward)
