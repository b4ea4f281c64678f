"""Dense tensors with reverse-mode automatic differentiation.

Every operation on a :class:`Tensor` that has a gradient-requiring ancestor
records its parents and a backward closure. :func:`backward` walks that graph
in reverse topological order and accumulates gradients into the ``grad``
slot of leaf tensors. Gradients accumulate across calls; call
``ParamStore.zero_grad`` (or set ``grad = None``) between steps.

Storage is float32 by default. ``with precision(np.float64):`` switches
newly created tensors to float64, which is what the gradient-check tests use.
Reductions always accumulate in float64.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from dhal.errors import ContractError, DimensionError
from dhal.nn import special

_DTYPE = np.float32


def default_dtype():
    return _DTYPE


@contextmanager
def precision(dtype):
    """Temporarily change the dtype of newly created tensors."""
    global _DTYPE
    prev = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


def _as_array(x) -> np.ndarray:
    if isinstance(x, np.ndarray) and x.dtype == _DTYPE:
        return x
    return np.asarray(x, dtype=_DTYPE)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_ufunc__ = None  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    # -- introspection -------------------------------------------------
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- operators -------------------------------------------------------
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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise arithmetic ------------------------------------------------
def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    return _node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    out = a.data / b.data
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(a) -> Tensor:
    a = tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = tensor(a)
    return _node(a.data**exponent, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a) -> Tensor:
    a = tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,))


def absolute(a) -> Tensor:
    a = tensor(a)
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def minimum(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    pick_a = a.data <= b.data
    return _node(
        np.where(pick_a, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
    )


def maximum(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    pick_a = a.data >= b.data
    return _node(
        np.where(pick_a, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
    )


def where(cond, a, b) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    a, b = tensor(a), tensor(b)
    return _node(
        np.where(cond, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * cond, a.shape), _unbroadcast(g * ~cond, b.shape)),
    )


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only where lo <= a <= hi."""
    a = tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# -- activations -----------------------------------------------------------
def relu(a) -> Tensor:
    a = tensor(a)
    pos = a.data > 0
    return _node(a.data * pos, (a,), lambda g: (g * pos,))


def elu(a) -> Tensor:
    a = tensor(a)
    ex = np.exp(np.minimum(a.data, 0))
    # d/dx elu = 1 on the positive side and exp(x) elsewhere, which is exactly ex
    return _node(np.maximum(a.data, 0) + (ex - 1), (a,), lambda g: (g * ex,))


def tanh(a) -> Tensor:
    a = tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1 - out * out),))


def sigmoid(a) -> Tensor:
    a = tensor(a)
    x = a.data
    ex = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + ex), ex / (1 + ex)).astype(x.dtype)
    return _node(out, (a,), lambda g: (g * out * (1 - out),))


def _softplus_np(x: np.ndarray) -> np.ndarray:
    big = x > 20
    small = np.log1p(np.exp(np.minimum(x, 20)))
    return np.where(big, x + np.log1p(np.exp(-np.abs(x))), small)


def softplus(a) -> Tensor:
    a = tensor(a)
    x = a.data
    sig = 0.5 * (1 + np.tanh(0.5 * x))
    return _node(_softplus_np(x).astype(x.dtype), (a,), lambda g: (g * sig,))


def softplus_offset(a) -> Tensor:
    """log(1 + e^x) + 1 + 1e-6, the output activation for Beta shape parameters."""
    a = tensor(a)
    x = a.data
    sig = 0.5 * (1 + np.tanh(0.5 * x))
    out = (_softplus_np(x.astype(np.float64)) + 1.0 + 1e-6).astype(x.dtype)
    return _node(out, (a,), lambda g: (g * sig,))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = tensor(a)
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return _node(out, (a,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


def softmax(a, axis: int = -1) -> Tensor:
    a = tensor(a)
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    return _node(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def lgamma(a) -> Tensor:
    a = tensor(a)
    out = special.lgamma(a.data).astype(a.data.dtype)
    return _node(out, (a,), lambda g: (g * special.digamma(a.data).astype(g.dtype),))


def digamma(a) -> Tensor:
    a = tensor(a)
    out = special.digamma(a.data).astype(a.data.dtype)
    return _node(out, (a,), lambda g: (g * special.trigamma(a.data).astype(g.dtype),))


# -- reductions and shape --------------------------------------------------
def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.data.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.data.dtype),)

    return _node(np.asarray(out), (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = tensor(a)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = tensor(a)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, idx) -> Tensor:
    a = tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node(a.data[idx], (a,), backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _node(
        np.concatenate([t.data for t in ts], axis=ax),
        ts,
        lambda g: tuple(np.split(g, bounds, axis=ax)),
    )


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [tensor(t) for t in tensors]
    return _node(
        np.stack([t.data for t in ts], axis=axis),
        ts,
        lambda g: tuple(np.moveaxis(g, axis, 0)),
    )


# -- linear algebra --------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(a.data @ b.data, (a, b), backward)


def linear(x, weight, bias=None) -> Tensor:
    """x @ weight + bias with weight stored as (in, out)."""
    x, weight = tensor(x), tensor(weight)
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(
            f"linear layer expects input last dim {weight.shape[0]}, got input shape {x.shape}"
        )
    out = x.data @ weight.data
    parents = [x, weight]
    if bias is not None:
        bias = tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        gx = g @ weight.data.T if x.requires_grad else None
        g2 = g.reshape(-1, g.shape[-1])
        gw = x.data.reshape(-1, x.shape[-1]).T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0, dtype=np.float64).astype(g.dtype)

    return _node(out, parents, backward)


def conv1d_output_length(length: int, kernel: int, stride: int) -> int:
    return (length - kernel) // stride + 1


def conv1d(x, weight, bias=None, stride: int = 1) -> Tensor:
    """Valid cross-correlation of x (batch, channels, time) with weight (out, in, kernel)."""
    x, weight = tensor(x), tensor(weight)
    if x.ndim != 3:
        raise DimensionError(f"conv1d expects (batch, channels, time), got {x.shape}")
    b_, c, length = x.shape
    o, ci, k = weight.shape
    if ci != c:
        raise DimensionError(f"conv1d expects {ci} input channels, got input shape {x.shape}")
    if length < k:
        raise DimensionError(f"conv1d time length {length} is shorter than kernel {k}")
    lout = conv1d_output_length(length, k, stride)
    win = np.lib.stride_tricks.sliding_window_view(x.data, k, axis=2)[:, :, ::stride, :]
    cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(b_ * lout, c * k)
    wmat = weight.data.reshape(o, c * k)
    out = (cols @ wmat.T).reshape(b_, lout, o)
    if bias is not None:
        bias = tensor(bias)
        out = out + bias.data
    out = np.ascontiguousarray(out.transpose(0, 2, 1))
    parents = [x, weight] + ([bias] if bias is not None else [])

    def backward(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(b_ * lout, o)
        gw = (gm.T @ cols).reshape(o, c, k)
        gx = None
        if x.requires_grad:
            gcols = (gm @ wmat).reshape(b_, lout, c, k)
            gx = np.zeros_like(x.data)
            span = stride * (lout - 1) + 1
            for j in range(k):
                gx[:, :, j : j + span : stride] += gcols[:, :, :, j].transpose(0, 2, 1)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2), dtype=np.float64).astype(g.dtype)

    return _node(out, parents, backward)


# -- reverse pass ----------------------------------------------------------
def _topo_order(root: Tensor) -> list:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every gradient-requiring leaf."""
    if not isinstance(loss, Tensor) or loss.size != 1:
        shape = getattr(loss, "shape", type(loss).__name__)
        raise ContractError(f"backward needs a scalar loss, got shape {shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.data.dtype)
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
