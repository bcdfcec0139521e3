"""Dense tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active (and with at least one
input that requires a gradient) are recorded in execution order.
``Tape.backward`` replays the record in exact reverse order and accumulates
gradients additively into ``Tensor.grad``.  Outside a tape every op is a
plain numpy computation.
"""

from __future__ import annotations

import threading

import numpy as np

from ..errors import InvalidShape, NumericError

_local = threading.local()


def _stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape():
    stack = _stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class Tape:
    """Ordered record of differentiable ops.  Use as a context manager."""

    def __init__(self):
        self.records = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def __len__(self):
        return len(self.records)

    def record(self, op, inputs, output, backward):
        self.records.append((op, inputs, output, backward))

    def backward(self, loss: Tensor, grad=None):
        if grad is None:
            if loss.size != 1:
                raise InvalidShape("backward without an explicit seed needs a scalar loss")
            grad = np.ones_like(loss.data)
        loss.grad = grad if loss.grad is None else loss.grad + grad
        for op, inputs, output, fn in reversed(self.records):
            g = output.grad
            if g is None:
                continue
            for t, gi in zip(inputs, fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                t.grad = gi if t.grad is None else t.grad + gi


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if isinstance(like, Tensor) else None
    return Tensor(np.asarray(x, dtype=dtype))


def _check_finite(op, arr):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {op}")


def _result(op, data, inputs, backward):
    _check_finite(op, data)
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(op, inputs, out, backward)
    return out


def unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a, b), as_tensor(b, a)
    return _result("add", a.data + b.data, (a, b),
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a, b), as_tensor(b, a)
    return _result("sub", a.data - b.data, (a, b),
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a, b), as_tensor(b, a)
    return _result("mul", a.data * b.data, (a, b),
                   lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def power(a, p: float):
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = a.data ** p
    return _result("power", out, (a,), lambda g: (g * p * a.data ** (p - 1),))


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _result("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _result("relu", a.data * mask, (a,), lambda g: (g * mask,))


def _sigmoid(x):
    # Split by sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result("softmax", out, (a,), backward)


# -- reductions and shape ops -----------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result("sum", np.asarray(out), (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / count)


def reshape(a, shape):
    a = as_tensor(a)
    return _result("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = as_tensor(a)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a, idx):
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        if _is_advanced(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _result("getitem", np.array(a.data[idx]), (a,), backward)


def _is_advanced(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _result("concat", out, tuple(tensors), backward)


# -- linear algebra ----------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a, b), as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise InvalidShape(f"matmul shapes {a.shape} and {b.shape} do not align")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _result("matmul", a.data @ b.data, (a, b), backward)


def linear(x, W, b=None):
    """``y = x W + b`` over the last axis of ``x``."""
    x, W = as_tensor(x, W), as_tensor(W, x)
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise InvalidShape(f"linear: input width {x.shape[-1]} vs weight {W.shape}")
    out = x.data @ W.data
    inputs = (x, W)
    if b is not None:
        b = as_tensor(b, x)
        if b.shape != (W.shape[1],):
            raise InvalidShape(f"linear: bias shape {b.shape} vs {W.shape[1]} outputs")
        out = out + b.data
        inputs = (x, W, b)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        grads = [g @ W.data.T, x2.T @ g2]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _result("linear", out, inputs, backward)


def causal_conv1d(x, kernel, bias=None):
    """Causal 1-D convolution over time.

    ``x`` is (B, T, C_in), ``kernel`` is (K, C_in, C_out).  The input is left
    padded with K-1 zeros so ``y[t] = sum_j x[t - K + 1 + j] @ kernel[j]``
    depends only on ``x[t-K+1 .. t]``.
    """
    x, kernel = as_tensor(x, kernel), as_tensor(kernel, x)
    if kernel.ndim != 3 or x.ndim != 3 or kernel.shape[1] != x.shape[2]:
        raise InvalidShape(f"causal_conv1d: input {x.shape} vs kernel {kernel.shape}")
    k, c_in, c_out = kernel.shape
    if k < 1:
        raise InvalidShape("kernel size must be >= 1")
    cols = conv_columns(x.data, k)
    w2 = kernel.data.reshape(k * c_in, c_out)
    out = cols @ w2
    inputs = (x, kernel)
    if bias is not None:
        bias = as_tensor(bias, x)
        out = out + bias.data
        inputs = (x, kernel, bias)

    def backward(g):
        bsz, t = g.shape[:2]
        gcols = (g @ w2.T).reshape(bsz, t, k, c_in)
        gx = np.zeros_like(x.data)
        for j in range(k):
            shift = k - 1 - j
            gx[:, :t - shift] += gcols[:, shift:, j]
        gw = (cols.reshape(-1, k * c_in).T @ g.reshape(-1, c_out)).reshape(k, c_in, c_out)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.reshape(-1, c_out).sum(axis=0))
        return grads

    return _result("causal_conv1d", out, inputs, backward)


def conv_columns(x, k):
    """(B, T, C) -> (B, T, K*C) window of the last K frames, zero history."""
    bsz, t, c = x.shape
    padded = np.concatenate([np.zeros((bsz, k - 1, c), dtype=x.dtype), x], axis=1)
    cols = np.stack([padded[:, j:j + t] for j in range(k)], axis=2)
    return cols.reshape(bsz, t, k * c)


# -- gated recurrent unit ---------------------------------------------------

def gru_cell_forward(xg, h, Wh, bh):
    """One GRU update given the precomputed input projection ``xg``.

    Gate order in the 3H axis is (reset, update, candidate).  Returns the new
    state and a cache for :func:`gru_cell_backward`.
    """
    hdim = h.shape[-1]
    hg = h @ Wh + bh
    r = _sigmoid(xg[..., :hdim] + hg[..., :hdim])
    z = _sigmoid(xg[..., hdim:2 * hdim] + hg[..., hdim:2 * hdim])
    hn = hg[..., 2 * hdim:]
    n = np.tanh(xg[..., 2 * hdim:] + r * hn)
    h_new = (1.0 - z) * n + z * h
    return h_new, (h, r, z, n, hn)


def gru_cell_backward(g, cache, Wh):
    h, r, z, n, hn = cache
    dn = g * (1.0 - z) * (1.0 - n * n)
    dz = g * (h - n) * z * (1.0 - z)
    dr = dn * hn * r * (1.0 - r)
    dxg = np.concatenate([dr, dz, dn], axis=-1)
    dhg = np.concatenate([dr, dz, dn * r], axis=-1)
    dh = dhg @ Wh.T + g * z
    return dxg, dhg, dh


def gru_step(x_t, h_prev, Wx, Wh, bx, bh):
    """Single GRU step: (B, I), (B, H) -> (B, H)."""
    x_t, h_prev = as_tensor(x_t, Wx), as_tensor(h_prev, Wx)
    Wx, Wh, bx, bh = (as_tensor(p, x_t) for p in (Wx, Wh, bx, bh))
    hdim = h_prev.shape[-1]
    if Wx.shape != (x_t.shape[-1], 3 * hdim) or Wh.shape != (hdim, 3 * hdim):
        raise InvalidShape(f"gru_step: Wx {Wx.shape}, Wh {Wh.shape} for I={x_t.shape[-1]}, H={hdim}")
    xg = x_t.data @ Wx.data + bx.data
    h_new, cache = gru_cell_forward(xg, h_prev.data, Wh.data, bh.data)

    def backward(g):
        dxg, dhg, dh = gru_cell_backward(g, cache, Wh.data)
        return (dxg @ Wx.data.T, dh, x_t.data.T @ dxg, h_prev.data.T @ dhg,
                dxg.sum(axis=0), dhg.sum(axis=0))

    return _result("gru_step", h_new, (x_t, h_prev, Wx, Wh, bx, bh), backward)


def gru_sequence(x, h0, Wx, Wh, bx, bh):
    """Unrolled GRU over (B, T, I) from state ``h0`` (B, H); returns (B, T, H).

    Recorded as one tape entry; backward runs truncation-free BPTT.
    """
    x, h0 = as_tensor(x, Wx), as_tensor(h0, Wx)
    Wx, Wh, bx, bh = (as_tensor(p, x) for p in (Wx, Wh, bx, bh))
    hdim = h0.shape[-1]
    if Wx.shape != (x.shape[-1], 3 * hdim) or Wh.shape != (hdim, 3 * hdim):
        raise InvalidShape(f"gru_sequence: Wx {Wx.shape}, Wh {Wh.shape} for I={x.shape[-1]}, H={hdim}")
    bsz, t_len = x.shape[:2]
    xg = x.data @ Wx.data + bx.data
    out = np.empty((bsz, t_len, hdim), dtype=np.result_type(x.data, Wh.data))
    caches = []
    h = h0.data
    for t in range(t_len):
        h, cache = gru_cell_forward(xg[:, t], h, Wh.data, bh.data)
        if not np.all(np.isfinite(h)):
            raise NumericError(f"GRU state became non-finite at step {t}")
        out[:, t] = h
        caches.append(cache)

    def backward(g):
        dxg = np.empty_like(xg)
        dWh = np.zeros_like(Wh.data)
        dbh = np.zeros_like(bh.data)
        dh = np.zeros_like(h0.data)
        for t in range(t_len - 1, -1, -1):
            dxg_t, dhg, dh = gru_cell_backward(g[:, t] + dh, caches[t], Wh.data)
            dxg[:, t] = dxg_t
            dWh += caches[t][0].T @ dhg
            dbh += dhg.sum(axis=0)
        x2 = x.data.reshape(-1, x.shape[-1])
        dxg2 = dxg.reshape(-1, 3 * hdim)
        return (dxg @ Wx.data.T, dh, x2.T @ dxg2, dWh, dxg2.sum(axis=0), dbh)

    return _result("gru_sequence", out, (x, h0, Wx, Wh, bx, bh), backward)
