"""Dense tensors with reverse-mode automatic differentiation.

Feature maps are laid out channels-first, either ``(C, H, W)`` or batched
``(N, C, H, W)``.  Every operation records a closure on the output tensor;
:func:`backward` walks the reachable nodes in reverse creation order.

Arithmetic runs in float32 by default.  Wrap code in ``precision(np.float64)``
for gradient checking.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np

_default_dtype = np.dtype(np.float32)
_grad_enabled = True
_ids = itertools.count()

# kernels at or above this size take the FFT route in conv2d_valid
FFT_KERNEL_MIN = 9


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


@contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with."""
    global _default_dtype
    previous = _default_dtype
    _default_dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _default_dtype = previous


def default_dtype() -> np.dtype:
    return _default_dtype


@contextmanager
def no_grad():
    """Skip graph recording (inference)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """An array plus the bookkeeping needed to differentiate through it."""

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, _op: str = "leaf"):
        arr = np.asarray(data)
        if arr.dtype != _default_dtype:
            arr = arr.astype(_default_dtype)
        if arr.ndim > 4:
            raise ValueError(f"tensors have at most 4 dims, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"{_op}: non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents = tuple(_parents)
        self._backward = _backward
        self._op = _op
        self._id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"

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
        return scale(self, -1.0)


class Parameter(Tensor):
    """A trainable leaf with its RMSprop running average of squared grads."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True, _op="param")
        self.grad = np.zeros_like(self.data)
        self.rms_state = np.zeros_like(self.data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=parents if needs else (),
                  _backward=backward if needs else None, _op=op)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    nodes = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        stack.extend(p for p in t._parents if p.requires_grad)

    grads = {loss._id: np.ones_like(loss.data)}
    for node_id in sorted(nodes, reverse=True):
        node = nodes[node_id]
        g = grads.pop(node_id, None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if np.any(b.data == 0):
        raise ZeroDivisionError("div: zero in denominator")
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), bw, "div")


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = x.data.dtype.type(c)
    return _result(x.data * c, (x,), lambda g: (g * c,), "scale")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0), (x,), lambda g: (g * mask,), "relu")


def log1p_pos(x) -> Tensor:
    """ln(1 + x) for x >= 0."""
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise ValueError("log1p_pos: negative input")
    return _result(np.log1p(x.data), (x,), lambda g: (g / (1 + x.data),), "log1p_pos")


def clip(x, lo, hi) -> Tensor:
    """Clamp to [lo, hi]; gradient passes inside the closed range, zero outside.

    ``lo`` and ``hi`` are constants (scalars or arrays broadcastable to x).
    """
    x = as_tensor(x)
    lo = np.asarray(lo, dtype=x.data.dtype)
    hi = np.asarray(hi, dtype=x.data.dtype)
    inside = (x.data >= lo) & (x.data <= hi)
    out = np.minimum(np.maximum(x.data, lo), hi)
    return _result(out, (x,), lambda g: (g * inside,), "clip")


def minimum(a, b) -> Tensor:
    """Elementwise min; gradient goes to ``a`` on ties."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data

    def bw(g):
        return _unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)

    return _result(np.where(take_a, a.data, b.data), (a, b), bw, "minimum")


def channel_max(x) -> Tensor:
    """Max over the channel axis (keepdims); gradient to the first argmax."""
    x = as_tensor(x)
    axis = x.ndim - 3
    idx = np.argmax(x.data, axis=axis)
    idx = np.expand_dims(idx, axis)
    out = np.take_along_axis(x.data, idx, axis=axis)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, g, axis=axis)
        return (gx,)

    return _result(out, (x,), bw, "channel_max")


def channel_mean(x) -> Tensor:
    """Mean over the channel axis (keepdims)."""
    x = as_tensor(x)
    axis = x.ndim - 3
    n = x.shape[axis]
    out = x.data.sum(axis=axis, keepdims=True) / x.data.dtype.type(n)
    return _result(out, (x,), lambda g: (np.broadcast_to(g / n, x.shape).astype(x.data.dtype),), "channel_mean")


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    return _result(np.asarray(x.data.sum()), (x,),
                   lambda g: (np.full(x.shape, g, dtype=x.data.dtype),), "sum")


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    return _result(np.asarray(x.data.mean()), (x,),
                   lambda g: (np.full(x.shape, g / n, dtype=x.data.dtype),), "mean")


# ------------------------------------------------------------------- spatial


def _as4(x: Tensor):
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ValueError(f"expected (C,H,W) or (N,C,H,W), got shape {x.shape}")


def _conv_im2col(x4, w, k):
    n, c, h, wd = x4.shape
    ho, wo = h - k + 1, wd - k + 1
    xt = x4.transpose(1, 0, 2, 3)
    # rows ordered (c, i, j) to match w.reshape(cout, -1); each shift copies contiguous planes
    cols = np.empty((c, k, k, n, ho, wo), dtype=x4.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i:i + ho, j:j + wo]
    cols = cols.reshape(c * k * k, n * ho * wo)
    out = w.reshape(w.shape[0], -1) @ cols
    return out.reshape(-1, n, ho, wo).transpose(1, 0, 2, 3), cols


def _conv_im2col_backward(g4, x4, w, cols, need_x, need_w):
    n, c, h, wd = x4.shape
    cout, _, k, _ = w.shape
    ho, wo = g4.shape[2], g4.shape[3]
    gt = g4.transpose(1, 0, 2, 3).reshape(cout, -1)
    gw = (gt @ cols.T).reshape(w.shape) if need_w else None
    gx = None
    if need_x:
        gcols = (w.reshape(cout, -1).T @ gt).reshape(c, k, k, n, ho, wo)
        gxt = np.zeros((c, n, h, wd), dtype=x4.dtype)
        for i in range(k):
            for j in range(k):
                gxt[:, :, i:i + ho, j:j + wo] += gcols[:, i, j]
        gx = gxt.transpose(1, 0, 2, 3)
    return gx, gw


def _fft_correlate_valid(x4, w):
    """Valid cross-correlation via FFT at the input's own size (no wrap-around
    reaches the valid region)."""
    n, c, h, wd = x4.shape
    k = w.shape[-1]
    s = (h, wd)
    xf = np.fft.rfft2(x4.astype(np.float64), s=s)
    wf = np.fft.rfft2(w[:, :, ::-1, ::-1].astype(np.float64), s=s)
    out = np.fft.irfft2(np.einsum("nchw,ochw->nohw", xf, wf), s=s)
    return out[:, :, k - 1:, k - 1:]


def _fft_backward(g4, x4, w, need_x, need_w):
    n, c, h, wd = x4.shape
    s = (h, wd)
    gf = np.fft.rfft2(g4.astype(np.float64), s=s)
    gx = gw = None
    if need_x:
        # full convolution of the output grad with the kernel has length h exactly
        wf = np.fft.rfft2(w.astype(np.float64), s=s)
        gx = np.fft.irfft2(np.einsum("nohw,ochw->nchw", gf, wf), s=s).astype(x4.dtype)
    if need_w:
        k = w.shape[-1]
        xf = np.fft.rfft2(x4.astype(np.float64), s=s)
        gfl = np.fft.rfft2(g4[:, :, ::-1, ::-1].astype(np.float64), s=s)
        full = np.fft.irfft2(np.einsum("nchw,nohw->ochw", xf, gfl), s=s)
        ho, wo = g4.shape[2], g4.shape[3]
        gw = full[:, :, ho - 1:ho - 1 + k, wo - 1:wo - 1 + k].astype(w.dtype)
    return gx, gw


def conv2d_valid(x, kernels, bias=None) -> Tensor:
    """Valid 2-D cross-correlation, stride 1.

    x: (Cin,H,W) or (N,Cin,H,W); kernels: (Cout,Cin,k,k); bias: (Cout,) or None.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    x4, squeeze = _as4(x)
    w = kernels.data
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ValueError(f"kernels must be (Cout,Cin,k,k), got {w.shape}")
    cout, cin, k, _ = w.shape
    if cin != x4.shape[1]:
        raise ValueError(f"channel mismatch: input has {x4.shape[1]}, kernels expect {cin}")
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    if k > min(x4.shape[2], x4.shape[3]):
        raise ValueError(f"kernel {k} larger than image {x4.shape[2:]}")
    parents = [x, kernels]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ValueError(f"bias must have shape ({cout},), got {bias.shape}")
        parents.append(bias)

    use_fft = k >= FFT_KERNEL_MIN
    if use_fft:
        out = _fft_correlate_valid(x4, w).astype(x4.dtype)
        cols = None
    else:
        out, cols = _conv_im2col(x4, w, k)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        g4 = g[None] if squeeze else g
        need_x, need_w = x.requires_grad, kernels.requires_grad
        if use_fft:
            gx, gw = _fft_backward(g4, x4, w, need_x, need_w)
        else:
            gx, gw = _conv_im2col_backward(g4, x4, w, cols, need_x, need_w)
        if gx is not None and squeeze:
            gx = gx[0]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return grads

    return _result(out[0] if squeeze else out, parents, bw, "conv2d_valid")


def pad_edge(x, p: int) -> Tensor:
    """Replicate border pixels ``p`` times on every spatial side."""
    x = as_tensor(x)
    if p == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
    out = np.pad(x.data, widths, mode="edge")
    h, w = x.shape[-2:]

    def bw(g):
        g = g.copy()
        # fold the replicated rows/cols back onto the border
        g[..., p, :] += g[..., :p, :].sum(axis=-2)
        g[..., p + h - 1, :] += g[..., p + h:, :].sum(axis=-2)
        g[..., :, p] += g[..., :, :p].sum(axis=-1)
        g[..., :, p + w - 1] += g[..., :, p + w:].sum(axis=-1)
        return (g[..., p:p + h, p:p + w],)

    return _result(out, (x,), bw, "pad_edge")


def maxpool2(x) -> Tensor:
    x = as_tensor(x)
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {(h, w)}")
    lead = x.shape[:-2]
    blocks = x.data.reshape(*lead, h // 2, 2, w // 2, 2)
    blocks = np.moveaxis(blocks, -3, -2).reshape(*lead, h // 2, w // 2, 4)
    idx = np.argmax(blocks, axis=-1)  # first max in row-major order
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(*lead, h // 2, w // 2, 2, 2)
        return (np.moveaxis(gb, -2, -3).reshape(x.shape),)

    return _result(out, (x,), bw, "maxpool2")


def upsample2(x) -> Tensor:
    x = as_tensor(x)
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)
    lead = x.shape[:-2]
    h, w = x.shape[-2:]

    def bw(g):
        return (g.reshape(*lead, h, 2, w, 2).sum(axis=(-3, -1)),)

    return _result(out, (x,), bw, "upsample2")


def concat_channels(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim or a.shape[:-3] != b.shape[:-3] or a.shape[-2:] != b.shape[-2:]:
        raise ValueError(f"concat_channels: incompatible shapes {a.shape} and {b.shape}")
    axis = a.ndim - 3
    ca = a.shape[axis]
    if b.shape[axis] < 1:
        raise ValueError("concat_channels: empty second operand")
    out = np.concatenate([a.data, b.data], axis=axis)

    def bw(g):
        return np.split(g, [ca], axis=axis)

    return _result(out, (a, b), bw, "concat")


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Align-corners linear interpolation as an (n_out, n_in) matrix."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m
    src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 2)
    f = src - i0
    rows = np.arange(n_out)
    m[rows, i0] += 1 - f
    m[rows, i0 + 1] += f
    return m


def resize_bilinear(x, size) -> Tensor:
    """Align-corners bilinear resize of the last two axes to ``size``."""
    x = as_tensor(x)
    h, w = x.shape[-2:]
    ho, wo = size
    rh = bilinear_matrix(h, ho, x.data.dtype)
    rw = bilinear_matrix(w, wo, x.data.dtype)
    out = rh @ x.data @ rw.T

    def bw(g):
        return (rh.T @ g @ rw,)

    return _result(out, (x,), bw, "resize_bilinear")


# ----------------------------------------------------------------------- loss


def bce_with_logits(logits, target) -> Tensor:
    """Mean binary cross-entropy on raw logits (stable log-sum-exp form)."""
    logits = as_tensor(logits)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=logits.data.dtype)
    if t.shape != logits.shape:
        raise ValueError(f"target shape {t.shape} != logits shape {logits.shape}")
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("bce_with_logits: target must be binary")
    z = logits.data
    # -[t ln s(z) + (1-t) ln(1-s(z))] = max(z,0) - z t + ln(1 + e^-|z|)
    per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    n = z.size

    def bw(g):
        sig = 0.5 * (1 + np.tanh(0.5 * z))
        return ((sig - t) * (g / n),)

    return _result(np.asarray(per.mean()), (logits,), bw, "bce_with_logits")
