"""Dense tensors with reverse-mode automatic differentiation on a flat tape.

Values are numpy arrays restricted to float32/float64. Every primitive op
that touches a tracked tensor appends a node (inputs, output, local
derivative closure) to the active Graph; backward() replays the tape once
in reverse. Matrix products and reductions go through np.matmul and np.sum:
run single-threaded these use a fixed summation algorithm, so repeated runs
on one machine are bit-identical (their rounding merely need not match a
naive sequential loop). Loop oracles in the tests therefore compare within
a small floating-point tolerance, while determinism tests compare bytes.
"""

from __future__ import annotations

import numpy as np


class DimensionError(ValueError):
    """Shape or axis mismatch between operands."""


class ContractError(RuntimeError):
    """An operation was called outside its contract (non-scalar backward, ...)."""


_ALLOWED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


# ---------------------------------------------------------------------------
# Graph / tape
# ---------------------------------------------------------------------------


class Graph:
    """Ordered record of primitive ops applied to tracked tensors.

    Node order is execution order; backward() walks the list exactly once
    in reverse. Use as a context manager to scope recording:

        with Graph() as g:
            loss = ...
        backward(loss)
    """

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes = []  # list of (out, inputs, backward_fn)

    def __enter__(self):
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _GRAPH_STACK.pop()
        return False

    def __len__(self):
        return len(self.nodes)


class no_grad:
    """Context manager that disables tape recording."""

    def __enter__(self):
        _GRAPH_STACK.append(None)
        return self

    def __exit__(self, *exc):
        _GRAPH_STACK.pop()
        return False


# Bottom of the stack is a default graph so free-standing op calls work.
_GRAPH_STACK: list = [Graph()]


def active_graph():
    return _GRAPH_STACK[-1]


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------


class Tensor:
    """Dense n-d numeric array with optional gradient tracking.

    data is a row-major numpy array (f32 or f64); grad, when populated, has
    the same shape and dtype. Leaf tensors are validated to be finite on
    construction; op outputs inherit finiteness from their inputs and are
    checked at the loss/optimizer boundary instead.
    """

    __slots__ = ("data", "requires_grad", "grad", "graph")

    def __init__(self, data, dtype=None, requires_grad=False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data contains NaN/Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.graph = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _wrap(arr):
        """Internal: wrap an op output without the finite check."""
        t = Tensor.__new__(Tensor)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.graph = None
        return t

    # -- properties -----------------------------------------------------------

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
    def dtype(self):
        return self.data.dtype

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        """Constant copy that blocks gradient flow."""
        return Tensor._wrap(self.data.copy())

    def assert_finite(self, what="tensor"):
        if not np.all(np.isfinite(self.data)):
            raise ValueError(f"{what} contains NaN/Inf")
        return self

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # -- operator sugar ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# Recording / backward
# ---------------------------------------------------------------------------


def _record(out, inputs, backward_fn):
    """Append a tape node if recording is on and any input is tracked."""
    g = _GRAPH_STACK[-1]
    if g is None:
        return out
    if not any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        return out
    out.requires_grad = True
    out.graph = g
    g.nodes.append((out, inputs, backward_fn))
    return out


def backward(loss):
    """Populate grad with d(loss)/d(tensor) for every tracked ancestor.

    loss must be a tracked scalar. Adjoints are accumulated in a scratch
    map during the reverse sweep and only added into .grad at the end, so
    repeated calls accumulate: two calls without zero_grad() leave exactly
    twice the single-call gradients.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ContractError("backward() requires a scalar tensor")
    if not loss.requires_grad:
        raise ContractError("backward() requires a tracked tensor")
    g = loss.graph
    adj = {id(loss): np.ones_like(loss.data)}
    refs = {id(loss): loss}
    if g is not None:
        for out, inputs, fn in reversed(g.nodes):
            gout = adj.get(id(out))
            if gout is None:
                continue
            grads = fn(gout)
            for t, gt in zip(inputs, grads):
                if gt is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                k = id(t)
                prev = adj.get(k)
                adj[k] = gt if prev is None else prev + gt
                refs[k] = t
    for k, total in adj.items():
        t = refs[k]
        # contributions may arrive as views; materialize on first write
        total = np.asarray(total)
        t.grad = total.copy() if t.grad is None else t.grad + total


# ---------------------------------------------------------------------------
# Summation helpers (plain ndarray in, ndarray out; deterministic kernels)
# ---------------------------------------------------------------------------


def _sum_axis(x, axis, keepdims=False):
    """Sum along one axis, preserving the input dtype."""
    return np.sum(x, axis=axis, keepdims=keepdims, dtype=x.dtype)


def _sum_all(x):
    """Sum of every element, preserving the input dtype."""
    return np.sum(x, dtype=x.dtype)


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back down to `shape`."""
    while g.ndim > len(shape):
        g = _sum_axis(g, 0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = _sum_axis(g, ax, keepdims=True)
    return g.reshape(shape)


def _mm(a, b):
    """Matrix product on ndarrays, batch dims broadcasting."""
    return np.matmul(a, b)


# ---------------------------------------------------------------------------
# Elementwise ops (b may be a tensor or a python scalar; shapes broadcast)
# ---------------------------------------------------------------------------


def _check_broadcast(a, b, opname):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: shapes {a.shape} and {b.shape} do not broadcast")


def add(a, b):
    a = as_tensor(a)
    if isinstance(b, Tensor):
        _check_broadcast(a.data, b.data, "add")
        out = Tensor._wrap(a.data + b.data)
        return _record(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                               _unbroadcast(g, b.data.shape)))
    out = Tensor._wrap(a.data + a.data.dtype.type(b))
    return _record(out, (a,), lambda g: (g,))


def sub(a, b):
    a = as_tensor(a)
    if isinstance(b, Tensor):
        _check_broadcast(a.data, b.data, "sub")
        out = Tensor._wrap(a.data - b.data)
        return _record(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                               _unbroadcast(-g, b.data.shape)))
    out = Tensor._wrap(a.data - a.data.dtype.type(b))
    return _record(out, (a,), lambda g: (g,))


def mul(a, b):
    a = as_tensor(a)
    if isinstance(b, Tensor):
        _check_broadcast(a.data, b.data, "mul")
        ad, bd = a.data, b.data
        out = Tensor._wrap(ad * bd)
        return _record(out, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape),
                                               _unbroadcast(g * ad, bd.shape)))
    s = a.data.dtype.type(b)
    out = Tensor._wrap(a.data * s)
    return _record(out, (a,), lambda g: (g * s,))


def scale(a, s):
    """Multiply by a python scalar."""
    return mul(a, float(s))


def div(a, b):
    a = as_tensor(a)
    if isinstance(b, Tensor):
        _check_broadcast(a.data, b.data, "div")
        ad, bd = a.data, b.data
        out = Tensor._wrap(ad / bd)
        od = out.data
        return _record(out, (a, b), lambda g: (_unbroadcast(g / bd, ad.shape),
                                               _unbroadcast(-g * od / bd, bd.shape)))
    s = a.data.dtype.type(b)
    out = Tensor._wrap(a.data / s)
    return _record(out, (a,), lambda g: (g / s,))


def neg(a):
    a = as_tensor(a)
    out = Tensor._wrap(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def maximum(a, b):
    """Elementwise max; gradient follows the winner (ties go to a)."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "maximum")
    mask = a.data >= b.data
    out = Tensor._wrap(np.where(mask, a.data, b.data))
    return _record(out, (a, b), lambda g: (_unbroadcast(g * mask, a.data.shape),
                                           _unbroadcast(g * ~mask, b.data.shape)))


def minimum(a, b):
    """Elementwise min; gradient follows the winner (ties go to a)."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "minimum")
    mask = a.data <= b.data
    out = Tensor._wrap(np.where(mask, a.data, b.data))
    return _record(out, (a, b), lambda g: (_unbroadcast(g * mask, a.data.shape),
                                           _unbroadcast(g * ~mask, b.data.shape)))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    out = Tensor._wrap(a.data * mask)
    return _record(out, (a,), lambda g: (g * mask,))


def abs_(a):
    """|x|; subgradient 0 at x == 0."""
    a = as_tensor(a)
    out = Tensor._wrap(np.abs(a.data))
    sign = np.sign(a.data)
    return _record(out, (a,), lambda g: (g * sign,))


def sigmoid(a):
    """Logistic function, overflow-safe on both tails; output in (0, 1)."""
    a = as_tensor(a)
    x = a.data
    out_arr = np.empty_like(x)
    pos = x >= 0
    out_arr[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out_arr[~pos] = e / (1.0 + e)
    out = Tensor._wrap(out_arr)
    s = out_arr
    return _record(out, (a,), lambda g: (g * s * (1.0 - s),))


def softplus(a):
    """log(1 + exp(x)) in the overflow-safe form max(x,0) + log1p(exp(-|x|))."""
    a = as_tensor(a)
    x = a.data
    out = Tensor._wrap(np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x))))
    # d softplus / dx = sigmoid(x)
    sig = np.empty_like(x)
    pos = x >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    sig[~pos] = e / (1.0 + e)
    return _record(out, (a,), lambda g: (g * sig,))


def sqrt(a):
    a = as_tensor(a)
    out = Tensor._wrap(np.sqrt(a.data))
    od = out.data
    return _record(out, (a,), lambda g: (g * 0.5 / od,))


# ---------------------------------------------------------------------------
# Shape ops
# ---------------------------------------------------------------------------


def reshape(a, shape):
    a = as_tensor(a)
    old = a.data.shape
    out = Tensor._wrap(np.reshape(a.data, shape))
    return _record(out, (a,), lambda g: (np.reshape(g, old),))


def permute(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor._wrap(np.transpose(a.data, axes))
    return _record(out, (a,), lambda g: (np.transpose(g, inv),))


def swap_last2(a):
    """Transpose the trailing two axes."""
    a = as_tensor(a)
    out = Tensor._wrap(np.swapaxes(a.data, -1, -2))
    return _record(out, (a,), lambda g: (np.swapaxes(g, -1, -2),))


def concat_last(a, b):
    """Concatenate along the last axis; other extents must match."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape[:-1] != b.data.shape[:-1]:
        raise DimensionError(
            f"concat_last: leading shapes differ: {a.data.shape} vs {b.data.shape}")
    ka = a.data.shape[-1]
    out = Tensor._wrap(np.concatenate([a.data, b.data], axis=-1))
    return _record(out, (a, b), lambda g: (np.ascontiguousarray(g[..., :ka]),
                                           np.ascontiguousarray(g[..., ka:])))


def slice_last(a, start, stop):
    """a[..., start:stop] as a decoupled copy."""
    a = as_tensor(a)
    n = a.data.shape[-1]
    out = Tensor._wrap(np.ascontiguousarray(a.data[..., start:stop]))

    def bwd(g):
        z = np.zeros_like(a.data)
        z[..., start:stop] = g
        return (z,)

    return _record(out, (a,), bwd)


def select0(a, i):
    """a[i] along the leading axis, as a decoupled copy."""
    a = as_tensor(a)
    out = Tensor._wrap(np.ascontiguousarray(a.data[i]))

    def bwd(g):
        z = np.zeros_like(a.data)
        z[i] = g
        return (z,)

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# Matmul
# ---------------------------------------------------------------------------


def matmul(a, b):
    """Matrix product over the trailing two axes; leading axes broadcast.

    Summation over the contracted axis is sequential (k = 0, 1, ...), so
    the result is bit-identical to a naive triple loop with the same
    accumulation order.
    """
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {ad.shape} @ {bd.shape}")
    if ad.dtype != bd.dtype:
        raise DimensionError(f"matmul dtypes differ: {ad.dtype} vs {bd.dtype}")
    try:
        np.broadcast_shapes(ad.shape[:-2], bd.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch dims do not broadcast: {ad.shape} @ {bd.shape}")
    out = Tensor._wrap(_mm(ad, bd))

    def bwd(g):
        ga = _unbroadcast(_mm(g, np.swapaxes(bd, -1, -2)), ad.shape)
        gb = _unbroadcast(_mm(np.swapaxes(ad, -1, -2), g), bd.shape)
        return (ga, gb)

    return _record(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def sum_all(a):
    """Scalar sum of all elements, row-major sequential order."""
    a = as_tensor(a)
    out = Tensor._wrap(np.asarray(_sum_all(a.data)))
    return _record(out, (a,), lambda g: (np.broadcast_to(g, a.data.shape).copy(),))


def mean_all(a):
    a = as_tensor(a)
    n = a.data.size
    if n == 0:
        raise DimensionError("mean of empty tensor")
    return div(sum_all(a), float(n))


def sum_last(a, keepdims=False):
    """Sum along the last axis in sequential order."""
    a = as_tensor(a)
    if a.data.ndim == 0:
        raise DimensionError("sum_last needs at least 1 axis")
    out = Tensor._wrap(_sum_axis(a.data, -1, keepdims=keepdims))

    def bwd(g):
        gg = g if keepdims else np.expand_dims(g, -1)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _record(out, (a,), bwd)


def mean_last(a, keepdims=False):
    a = as_tensor(a)
    n = a.data.shape[-1]
    if n == 0:
        raise DimensionError("mean over empty last axis")
    return div(sum_last(a, keepdims=keepdims), float(n))


# ---------------------------------------------------------------------------
# Fused row ops (last axis)
# ---------------------------------------------------------------------------


def softmax_rows(a):
    """Row-stochastic softmax over the last axis, max-subtracted for stability."""
    a = as_tensor(a)
    x = a.data
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError("softmax_rows needs a non-empty last axis")
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / _sum_axis(e, -1, keepdims=True)
    out = Tensor._wrap(p)

    def bwd(g):
        dot = _sum_axis(g * p, -1, keepdims=True)
        return (p * (g - dot),)

    return _record(out, (a,), bwd)


def log_softmax_rows(a):
    """log(softmax) over the last axis, numerically stable."""
    a = as_tensor(a)
    x = a.data
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError("log_softmax_rows needs a non-empty last axis")
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    z = _sum_axis(e, -1, keepdims=True)
    out = Tensor._wrap(shifted - np.log(z))
    p = e / z

    def bwd(g):
        return (g - p * _sum_axis(g, -1, keepdims=True),)

    return _record(out, (a,), bwd)


def layer_norm(a, gain, offset, eps=1e-5):
    """Normalize the last axis to mean 0 / variance 1, then gain * xhat + offset.

    eps sits inside the square root so constant rows normalize to zeros.
    """
    a, gain, offset = as_tensor(a), as_tensor(gain), as_tensor(offset)
    x = a.data
    n = x.shape[-1]
    mu = _sum_axis(x, -1, keepdims=True) / n
    xc = x - mu
    var = _sum_axis(xc * xc, -1, keepdims=True) / n
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out = Tensor._wrap(xhat * gain.data + offset.data)

    def bwd(g):
        gxh = g * gain.data
        m1 = _sum_axis(gxh, -1, keepdims=True) / n
        m2 = _sum_axis(gxh * xhat, -1, keepdims=True) / n
        gx = inv * (gxh - m1 - xhat * m2)
        ggain = _unbroadcast(g * xhat, gain.data.shape)
        goff = _unbroadcast(g, offset.data.shape)
        return (gx, ggain, goff)

    return _record(out, (a, gain, offset), bwd)
