"""Differentiable tensor operations.

Spatial ops take ``(C, H, W)`` feature maps; a leading batch axis
``(B, C, H, W)`` is accepted everywhere so training can vectorise over
scenes. Elementwise ops follow numpy broadcasting.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from konvlina.core.tensor import DimensionError, Tensor, as_tensor, record


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record("add", a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record("sub", a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record("mul", a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def vjp(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))
    return record("div", out, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record("neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return record("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    return record("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return record("silu", a.data * s, (a,),
                  lambda g: (g * s * (1.0 + a.data * (1.0 - s)),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return record("relu", a.data * mask, (a,), lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, batched over leading ones."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return record("matmul", out, (a, b), vjp)


# ---------------------------------------------------------------- shape ops

def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    return record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return record("swapaxes", np.swapaxes(a.data, ax1, ax2), (a,),
                  lambda g: (np.swapaxes(g, ax1, ax2),))


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return record("transpose", np.transpose(a.data, axes), (a,),
                  lambda g: (np.transpose(g, inv),))


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    out = np.broadcast_to(a.data, tuple(shape)).copy()
    return record("broadcast_to", out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat shapes {[t.shape for t in ts]} on axis {axis}: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return record("concat", out, ts, lambda g: np.split(g, bounds, axis=axis))


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    ax = axis % a.ndim
    idx = (slice(None),) * ax + (slice(start, stop),)

    def vjp(g):
        full = np.zeros(a.shape)
        full[idx] = g
        return (full,)
    return record("slice", a.data[idx].copy(), (a,), vjp)


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather entries of ``a`` along ``axis`` (repeats allowed)."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % a.ndim

    def vjp(g):
        full = np.zeros(a.shape)
        np.add.at(full, (slice(None),) * ax + (idx,), g)
        return (full,)
    return record("take", np.take(a.data, idx, axis=ax), (a,), vjp)


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)
    return record("sum", out, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = math.prod(a.shape[ax] for ax in axes)
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)
    return record("mean", out, (a,), vjp)


def amax(a, axis=None, keepdims: bool = False) -> Tensor:
    """Maximum along ``axis``; ties share the gradient equally."""
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    kept = a.data.max(axis=axes, keepdims=True)
    out = kept if keepdims else np.squeeze(kept, axis=axes)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        hit = a.data == kept
        return (hit * g / hit.sum(axis=axes, keepdims=True),)
    return record("amax", out, (a,), vjp)


# ---------------------------------------------------------------- softmax family

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return record("softmax", out, (a,),
                  lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    return record("log_softmax", out, (a,),
                  lambda g: (g - np.exp(out) * g.sum(axis=axis, keepdims=True),))


# ---------------------------------------------------------------- losses

def bce_with_logits(logits, targets) -> Tensor:
    """Elementwise binary cross-entropy on raw logits; targets are constant."""
    z = as_tensor(logits)
    t = np.asarray(as_tensor(targets).data)
    out = np.maximum(z.data, 0.0) - z.data * t + np.log1p(np.exp(-np.abs(z.data)))
    return record("bce_with_logits", out, (z,), lambda g: (g * (_sigmoid(z.data) - t),))


def smooth_l1(a, beta: float = 1.0) -> Tensor:
    a = as_tensor(a)
    x = a.data
    small = np.abs(x) < beta
    out = np.where(small, 0.5 * x * x / beta, np.abs(x) - 0.5 * beta)
    return record("smooth_l1", out, (a,),
                  lambda g: (g * np.where(small, x / beta, np.sign(x)),))


# ---------------------------------------------------------------- spatial ops

def _out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def unfold(x, kernel_size: int, stride: int = 1, padding: int = 0) -> Tensor:
    """im2col: ``(..., C, H, W)`` -> ``(..., H'*W', C*k*k)``.

    Columns are ordered (channel, kernel row, kernel col), matching a
    ``(C_out, C, k, k)`` weight reshaped to ``(C_out, C*k*k)``.
    """
    x = as_tensor(x)
    if x.ndim < 3:
        raise DimensionError(f"unfold expects (..., C, H, W), got {x.shape}")
    k, s, p = kernel_size, stride, padding
    *lead, C, H, W = x.shape
    if k > H + 2 * p or k > W + 2 * p:
        raise DimensionError(f"kernel {k}x{k} larger than padded input {H + 2 * p}x{W + 2 * p} (input {x.shape})")
    Ho, Wo = _out_size(H, k, s, p), _out_size(W, k, s, p)
    pad = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
    xp = np.pad(x.data, pad) if p else x.data
    win = sliding_window_view(xp, (k, k), axis=(-2, -1))[..., ::s, ::s, :, :]
    nl = len(lead)
    # (..., C, Ho, Wo, k, k) -> (..., Ho, Wo, C, k, k)
    perm = list(range(nl)) + [nl + 1, nl + 2, nl, nl + 3, nl + 4]
    out = np.ascontiguousarray(np.transpose(win, perm)).reshape(*lead, Ho * Wo, C * k * k)

    def vjp(g):
        g = g.reshape(*lead, Ho, Wo, C, k, k)
        gp = np.zeros(xp.shape)
        for i in range(k):
            for j in range(k):
                patch = np.moveaxis(g[..., i, j], -1, -3)  # (..., C, Ho, Wo)
                gp[..., i:i + s * (Ho - 1) + 1:s, j:j + s * (Wo - 1) + 1:s] += patch
        if p:
            gp = gp[..., p:-p, p:-p]
        return (gp,)
    return record("unfold", out, (x,), vjp)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``(…, C_in, H, W)`` with ``(C_out, C_in, k, k)``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise DimensionError(f"conv2d weight must be (C_out, C_in, k, k), got {weight.shape}")
    c_out, c_in, k, _ = weight.shape
    if x.ndim < 3 or x.shape[-3] != c_in:
        raise DimensionError(f"conv2d input {x.shape} does not match weight {weight.shape}")
    H, W = x.shape[-2:]
    cols = unfold(x, k, stride, padding)
    y = matmul(cols, swapaxes(reshape(weight, (c_out, c_in * k * k)), 0, 1))
    if bias is not None:
        y = add(y, bias)
    Ho, Wo = _out_size(H, k, stride, padding), _out_size(W, k, stride, padding)
    y = swapaxes(y, -1, -2)
    return reshape(y, (*x.shape[:-3], c_out, Ho, Wo))


def deconv2d(x, weight, bias=None, stride: int = 2, padding: int = 0) -> Tensor:
    """Transposed convolution with weight ``(C_in, C_out, k, k)``.

    Output size is ``(H - 1) * stride - 2 * padding + k``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if weight.ndim != 4 or x.ndim < 3 or x.shape[-3] != weight.shape[0]:
        raise DimensionError(f"deconv2d input {x.shape} does not match weight {weight.shape}")
    c_in, c_out, k, _ = weight.shape
    s, p = stride, padding
    *lead, _, H, W = x.shape
    Hf, Wf = (H - 1) * s + k, (W - 1) * s + k
    full = np.zeros((*lead, c_out, Hf, Wf))
    w = weight.data
    for i in range(k):
        for j in range(k):
            full[..., i:i + s * (H - 1) + 1:s, j:j + s * (W - 1) + 1:s] += np.einsum(
                "...chw,co->...ohw", x.data, w[:, :, i, j])
    out = full[..., p:Hf - p, p:Wf - p] if p else full

    def vjp(g):
        if p:
            gf = np.zeros(full.shape)
            gf[..., p:Hf - p, p:Wf - p] = g
        else:
            gf = g
        gx = np.zeros(x.shape)
        gw = np.zeros(w.shape)
        xb = x.data.reshape(-1, c_in, H, W)
        for i in range(k):
            for j in range(k):
                gs = gf[..., i:i + s * (H - 1) + 1:s, j:j + s * (W - 1) + 1:s]
                gx += np.einsum("...ohw,co->...chw", gs, w[:, :, i, j])
                gw[:, :, i, j] = np.einsum("nchw,nohw->co", xb, gs.reshape(-1, c_out, H, W))
        return gx, gw
    y = record("deconv2d", np.ascontiguousarray(out), (x, weight), vjp)
    if bias is not None:
        y = add(y, reshape(bias, (c_out, 1, 1)))
    return y


def _separable(name: str, x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """``rows @ x @ cols.T`` over the last two axes with constant factors."""
    out = np.matmul(np.matmul(rows, x.data), cols.T)
    return record(name, out, (x,), lambda g: (np.matmul(np.matmul(rows.T, g), cols),))


def pool_matrix(n: int, s: int) -> np.ndarray:
    """Averaging matrix for windows [floor(i*n/s), ceil((i+1)*n/s))."""
    m = np.zeros((s, n))
    for i in range(s):
        lo = (i * n) // s
        hi = -((-(i + 1) * n) // s)
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def adaptive_avg_pool2d(x, s: int) -> Tensor:
    x = as_tensor(x)
    if s <= 0:
        raise ValueError(f"pool size must be >= 1, got {s}")
    if x.ndim < 3:
        raise DimensionError(f"adaptive_avg_pool2d expects (..., C, H, W), got {x.shape}")
    H, W = x.shape[-2:]
    return _separable("adaptive_avg_pool2d", x, pool_matrix(H, s), pool_matrix(W, s))


def nearest_matrix(n_out: int, n_in: int) -> np.ndarray:
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), (np.arange(n_out) * n_in) // n_out] = 1.0
    return m


def resize_nearest(x, size: tuple[int, int]) -> Tensor:
    x = as_tensor(x)
    H, W = x.shape[-2:]
    Ho, Wo = size
    return _separable("resize_nearest", x, nearest_matrix(Ho, H), nearest_matrix(Wo, W))
