"""Minimal reverse-mode differentiation over float64 numpy arrays.

Operations are recorded on the active :class:`Graph` (a tape) whenever an
input requires gradients. Because nodes are appended as they are created,
the tape is already in topological order and :func:`backward` just walks it
in reverse.

    with Graph():
        loss = (w * x).sum()
        backward(loss)
    w.grad
"""

import builtins
import threading

import numpy as np
from scipy.special import expit

from . import kernels


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_local = threading.local()
_check_finite = False


def set_check_finite(flag):
    """Raise :class:`NonFiniteError` after any op that produces NaN/Inf."""
    global _check_finite
    _check_finite = bool(flag)


def active_graph():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Graph:
    """Tape of recorded operations for one forward/backward pass."""

    def __init__(self):
        self.nodes = []
        self.blocked = []  # leaves seen only through stop_gradient

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_node", "__weakref__")
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._node is None

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self):
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, inputs, backward, kind):
    out = Tensor(data)
    if _check_finite and not np.all(np.isfinite(out.data)):
        raise NonFiniteError(f"{kind}: non-finite output")
    graph = active_graph()
    if graph is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(out, inputs, backward)
        graph.nodes.append(out._node)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


def backward(loss, graph=None):
    """Fill ``.grad`` of every requires_grad leaf reachable from ``loss``."""
    graph = graph or active_graph()
    if graph is None:
        raise RuntimeError("backward: no active Graph")
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    if loss.is_leaf and loss.requires_grad:
        leaves[id(loss)] = loss
    for node in reversed(graph.nodes):
        for inp in node.inputs:
            if inp.requires_grad and inp.is_leaf:
                leaves[id(inp)] = inp
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if inp.is_leaf:
                leaves[key] = inp
    for leaf in graph.blocked:
        leaves.setdefault(id(leaf), leaf)
    for key, leaf in leaves.items():
        leaf.grad = grads.get(key, np.zeros_like(leaf.data))


# --------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("subtract", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "subtract")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("multiply", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), bw, "multiply")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("divide", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), bw, "divide")


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def square(a):
    a = as_tensor(a)
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def _sigmoid(x):
    return expit(x)


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus(a):
    a = as_tensor(a)
    ad = a.data
    return _make(_softplus(ad), (a,), lambda g: (g * _sigmoid(ad),), "softplus")


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def silu(a):
    """x * sigmoid(x), the network nonlinearity."""
    a = as_tensor(a)
    ad = a.data
    s = _sigmoid(ad)

    def bw(g):
        return (g * s * (1.0 + ad * (1.0 - s)),)

    return _make(ad * s, (a,), bw, "silu")


def clip(a, lo=None, hi=None):
    """Clamp; gradient is zero where the clamp is active."""
    a = as_tensor(a)
    ad = a.data
    out = np.clip(ad, lo, hi)
    inside = np.ones(ad.shape, dtype=bool)
    if lo is not None:
        inside &= ad >= lo
    if hi is not None:
        inside &= ad <= hi
    return _make(out, (a,), lambda g: (np.where(inside, g, 0.0),), "clip")


def where(cond, a, b):
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape

    def bw(g):
        return (_unbroadcast(np.where(cond, g, 0.0), sa), _unbroadcast(np.where(cond, 0.0, g), sb))

    return _make(np.where(cond, a.data, b.data), (a, b), bw, "where")


def stop_gradient(a):
    """Pass the value through; no gradient flows back to ``a``."""
    a = as_tensor(a)
    graph = active_graph()
    if graph is not None and a.requires_grad and a.is_leaf:
        graph.blocked.append(a)
    return Tensor(a.data)


# --------------------------------------------------------------------------
# reductions and shape manipulation


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims=False):  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return sum(a, axes, keepdims) * (1.0 / n)


def logsumexp(a, axis):
    a = as_tensor(a)
    ad = a.data
    m = ad.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.exp(ad - m).sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    soft = np.exp(ad - out)

    def bw(g):
        return (np.expand_dims(g, axis) * soft,)

    return _make(np.squeeze(out, axis=axis), (a,), bw, "logsumexp")


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors, axis=1):
    """Concatenate along ``axis`` (channels by default)."""
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            i != axis % len(ref) and n != m for i, (n, m) in enumerate(zip(t.shape, ref))
        ):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


def slice_channels(a, start, stop):
    """``a[:, start:stop]`` along the channel axis."""
    a = as_tensor(a)
    if not 0 <= start < stop <= a.shape[1]:
        raise ShapeError(f"slice: channel range [{start}, {stop}) outside shape {a.shape}")
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _make(a.data[:, start:stop].copy(), (a,), bw, "slice")


def split_channels(a, sizes):
    if builtins.sum(sizes) != a.shape[1]:
        raise ShapeError(f"split: sizes {list(sizes)} do not cover shape {a.shape}")
    out, start = [], 0
    for n in sizes:
        out.append(slice_channels(a, start, start + n))
        start += n
    return out



def embedding(table, index):
    """Rows of ``table`` selected by the integer array ``index``."""
    table = as_tensor(table)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise ShapeError(f"embedding: index out of range for table {table.shape}")
    shape = table.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(table.data[index], (table,), bw, "embedding")


# --------------------------------------------------------------------------
# linear algebra and convolution


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def conv2d(x, w, b=None):
    """Stride-1 "same" convolution. x: (B, Cin, H, W), w: (Cout, Cin, k, k)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[1] != x.shape[1] or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    cout, k = w.shape[0], w.shape[2]
    cols = kernels.im2col(np.ascontiguousarray(x.data), k)
    w2 = w.data.reshape(cout, -1)
    out = (w2 @ cols).reshape(cout, B, H, W)
    inputs = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {b.shape} does not match {cout} output channels")
        out += b.data[:, None, None, None]
        inputs = (x, w, b)
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, B * H * W)
        gx = gw = None
        if x.requires_grad:
            gx = kernels.col2im(w2.T @ g2, B, C, H, W, k)
        if w.requires_grad:
            gw = (g2 @ cols.T).reshape(w.shape)
        grads = (gx, gw)
        if b is not None:
            grads = grads + (g2.sum(axis=1),)
        return grads

    return _make(out, inputs, bw, "conv2d")


def bias_add(x, b):
    """Add a per-channel bias (C,) or per-example-channel bias (B, C) to (B, C, H, W)."""
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim == 1:
        if b.shape[0] != x.shape[1]:
            raise ShapeError(f"bias: shapes {x.shape} and {b.shape}")
        return add(x, reshape(b, (1, -1, 1, 1)))
    if b.shape != x.shape[:2]:
        raise ShapeError(f"bias: shapes {x.shape} and {b.shape}")
    return add(x, reshape(b, b.shape + (1, 1)))


def upsample2x(x):
    """Nearest-neighbour x2 upsampling of (B, C, H, W)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample: expected 4-d input, got {x.shape}")
    B, C, H, W = x.shape

    def bw(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return _make(x.data.repeat(2, axis=2).repeat(2, axis=3), (x,), bw, "upsample")


def avgpool2x(x):
    """2x2 average pooling of (B, C, H, W) with even H, W."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"avgpool: expected 4-d input with even sides, got {x.shape}")
    B, C, H, W = x.shape

    def bw(g):
        return (np.broadcast_to((g * 0.25)[:, :, :, None, :, None], (B, C, H // 2, 2, W // 2, 2)).reshape(B, C, H, W),)

    out = x.data.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))
    return _make(out, (x,), bw, "avgpool")


# --------------------------------------------------------------------------
# fused likelihood primitive


def disc_gauss_logprob(x, mean, logvar, floor=1e-12):
    """Elementwise log mass of the 256-level bin containing ``x``."""
    mean, logvar = as_tensor(mean), as_tensor(logvar)
    xd = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if mean.shape != logvar.shape or xd.shape != mean.shape:
        raise ShapeError(f"disc_gauss: shapes {xd.shape}, {mean.shape}, {logvar.shape}")
    logp, dm, dl = kernels.disc_gauss(xd, mean.data, logvar.data, floor)
    return _make(logp, (mean, logvar), lambda g: (g * dm, g * dl), "disc_gauss")


_KINDS = {
    "add": add,
    "subtract": sub,
    "multiply": mul,
    "divide": div,
    "matmul": matmul,
    "conv2d": conv2d,
    "upsample": upsample2x,
    "avgpool": avgpool2x,
    "concat": lambda *ts: concat(ts, axis=1),
    "slice": slice_channels,
    "exp": exp,
    "log": log,
    "square": square,
    "softplus": softplus,
    "silu": silu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "sum": sum,
    "mean": mean,
    "bias": bias_add,
    "stop_gradient": stop_gradient,
}


def forward_op(kind, *inputs, **kwargs):
    """Apply a primitive by name, e.g. ``forward_op("add", a, b)``."""
    try:
        fn = _KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)
