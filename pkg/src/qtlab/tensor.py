"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every value in qtlab is carried by :class:`Tensor`, a thin wrapper around a
row-major ``numpy.float64`` array.  Differentiable operations are recorded on
the innermost active :class:`Tape`; operations executed with no tape active
(or on tensors that do not require gradients) are plain numpy calls.

Typical use::

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = (x @ w).sum()
        tape.backward(loss)
    w.grad  # dloss/dw

The module also hosts the order statistics consumed by calibration and the
outlier-driven loss (:func:`max_abs`, :func:`median_abs`, :func:`stddev`,
:func:`percentile`).
"""

from __future__ import annotations

import os
import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import DataError, DimensionError, DomainError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "current_tape",
    "set_debug",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "linear",
    "reshape",
    "transpose",
    "getitem",
    "tsum",
    "mean",
    "exp",
    "log",
    "sqrt",
    "gelu",
    "softmax",
    "log_softmax",
    "layer_norm",
    "max_abs",
    "median_abs",
    "stddev",
    "percentile",
    "concat",
]

_DEBUG = os.environ.get("QTLAB_DEBUG", "") not in ("", "0")
_local = threading.local()


def set_debug(flag: bool) -> None:
    """Toggle finiteness checks after every operation."""
    global _DEBUG
    _DEBUG = bool(flag)


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_tape", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise DataError("tensor contains NaN or Inf")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._tape = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        if _DEBUG and not np.all(np.isfinite(arr)):
            raise DataError("operation produced NaN or Inf")
        t = cls.__new__(cls)
        t.data = np.asarray(arr, dtype=np.float64)
        t.grad = None
        t.requires_grad = requires_grad
        t._tape = None
        return t

    @property
    def shape(self) -> tuple:
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
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __float__(self) -> float:
        return self.item()

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, threshold=8)}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    # operator sugar
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended as operations execute, so parents always precede their
    children.  A tape belongs to the thread that entered it.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, parents: tuple, backward_fn: Callable) -> None:
        out._tape = self
        self.nodes.append(_Node(out, parents, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` on every ancestor of ``loss`` that requires it."""
        if not isinstance(loss, Tensor) or loss.size != 1:
            raise DomainError("backward() needs a scalar loss tensor")
        if loss._tape is not self:
            raise DomainError("loss was not produced on this tape")
        for node in self.nodes:
            node.out.grad = None
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            grads = node.backward(g)
            for parent, pg in zip(node.parents, grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(pg, dtype=np.float64).reshape(parent.shape)
                else:
                    parent.grad = parent.grad + pg


def backward(loss: Tensor) -> None:
    """Run reverse-mode differentiation from ``loss`` over its own tape."""
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise DomainError("backward() needs a scalar loss tensor")
    if loss._tape is None:
        raise DomainError("loss was not recorded on any tape")
    loss._tape.backward(loss)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(arr: np.ndarray, parents: tuple, backward_fn: Callable) -> Tensor:
    req = any(p.requires_grad for p in parents)
    out = Tensor._wrap(arr, req)
    if req:
        tape = current_tape()
        if tape is not None:
            tape.record(out, parents, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes (leading axes broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def _back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), _back)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` laid out as (in_features, out_features)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input width {x.shape[-1]} != weight rows {weight.shape[0]}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents = (x, weight, bias)

    def _back(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd.T
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out, parents, _back)


# shape manipulation


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _make(out, (a,), lambda g: (g.reshape(src),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(Ellipsis), type(None))) for i in items)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    basic = _is_basic_index(idx)

    def _back(g):
        gz = np.zeros(shape)
        if basic:
            gz[idx] = g
        else:
            np.add.at(gz, idx, g)
        return (gz,)

    return _make(np.array(a.data[idx]), (a,), _back)


# reductions


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def _back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), _back)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return div(tsum(a, axis, keepdims), float(count))


# pointwise nonlinearities


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value")
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of negative value")
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g / (2.0 * out),))


_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def _back(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _make(x * cdf, (a,), _back)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def _back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (a,), _back)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def _back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), _back)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the affine ``gamma``/``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd = x.data
    n = xd.shape[-1]
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data

    def _back(g):
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True) / n)
        flat_g = g.reshape(-1, n)
        ggamma = (flat_g * xhat.reshape(-1, n)).sum(axis=0)
        gbeta = flat_g.sum(axis=0)
        return gx, ggamma, gbeta

    return _make(xhat * gd + beta.data, (x, gamma, beta), _back)


# order statistics


def _rows(a: Tensor, axis) -> np.ndarray:
    if axis is None:
        return a.data.reshape(1, -1)
    if axis not in (-1, a.ndim - 1):
        raise DomainError("statistics reduce over the whole tensor or its last axis only")
    return a.data.reshape(-1, a.shape[-1])


def _out_shape(a: Tensor, axis) -> tuple:
    return () if axis is None else a.shape[:-1]


def max_abs(t, axis=None) -> Tensor:
    """Largest absolute value.

    The gradient is routed to the first index attaining the maximum.
    """
    a = as_tensor(t)
    x = _rows(a, axis)
    if x.shape[1] == 0:
        raise DomainError("max_abs of an empty tensor")
    rows = np.arange(x.shape[0])
    idx = np.argmax(np.abs(x), axis=1)
    picked = x[rows, idx]
    shape = a.shape

    def _back(g):
        gz = np.zeros_like(x)
        gz[rows, idx] = g.reshape(-1) * np.sign(picked)
        return (gz.reshape(shape),)

    return _make(np.abs(picked).reshape(_out_shape(a, axis)), (a,), _back)


def median_abs(t, axis=None) -> Tensor:
    """Median of absolute values; even lengths average the two central order statistics.

    Gradient goes to the element(s) defining the median, split 0.5/0.5 for
    even lengths.
    """
    a = as_tensor(t)
    x = _rows(a, axis)
    n = x.shape[1]
    if n == 0:
        raise DomainError("median_abs of an empty tensor")
    ax = np.abs(x)
    rows = np.arange(x.shape[0])
    # A full sort is cheaper than argpartition here; the defining elements are
    # recovered as the first position holding each central order statistic.
    srt = np.sort(ax, axis=1)
    v1, v2 = srt[:, (n - 1) // 2], srt[:, n // 2]
    i1 = np.argmax(ax == v1[:, None], axis=1)
    i2 = i1 if n % 2 else np.argmax(ax == v2[:, None], axis=1)
    val = 0.5 * (ax[rows, i1] + ax[rows, i2])
    s1, s2 = np.sign(x[rows, i1]), np.sign(x[rows, i2])
    shape = a.shape

    def _back(g):
        g = g.reshape(-1)
        gz = np.zeros_like(x)
        np.add.at(gz, (rows, i1), 0.5 * g * s1)
        np.add.at(gz, (rows, i2), 0.5 * g * s2)
        return (gz.reshape(shape),)

    return _make(val.reshape(_out_shape(a, axis)), (a,), _back)


def stddev(t, axis=None) -> Tensor:
    """Population standard deviation (divides by N) of the signed values."""
    a = as_tensor(t)
    x = _rows(a, axis)
    n = x.shape[1]
    if n < 2:
        raise DomainError("stddev needs at least two elements")
    dev = x - x.mean(axis=1, keepdims=True)
    sd = np.sqrt((dev * dev).mean(axis=1))
    shape = a.shape

    def _back(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(sd > 0, g.reshape(-1) / (n * sd), 0.0)
        return ((dev * scale[:, None]).reshape(shape),)

    return _make(sd.reshape(_out_shape(a, axis)), (a,), _back)


def percentile(t, p: float) -> float:
    """``p``-quantile of ``|t|`` with linear interpolation between closest ranks."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    if not 0.0 <= p <= 1.0:
        raise DomainError(f"percentile fraction must lie in [0, 1], got {p}")
    if data.size == 0:
        raise DomainError("percentile of an empty tensor")
    return float(np.quantile(np.abs(data.reshape(-1)), p))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def _back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, _back)
