"""Differentiable primitives over :class:`~csg3dct.tensor.Tensor`.

Every op computes its forward with numpy and tapes a closure returning one
gradient per input.
"""
from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from scipy.special import erf

from . import kernels
from .tensor import ShapeError, Tensor, as_tensor, make_result, record_ops


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _triple(v) -> tuple:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ValueError(f"expected 3 values, got {v}")
    return v


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = as_tensor(a) if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    out = a.data + b.data

    def backward(g):
        return (unbroadcast(g, a.shape) if a.requires_grad else None,
                unbroadcast(g, b.shape) if b.requires_grad else None)
    return make_result(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a = as_tensor(a) if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    out = a.data - b.data

    def backward(g):
        return (unbroadcast(g, a.shape) if a.requires_grad else None,
                unbroadcast(-g, b.shape) if b.requires_grad else None)
    return make_result(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a = as_tensor(a) if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    out = a.data * b.data

    def backward(g):
        return (unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                unbroadcast(g * a.data, b.shape) if b.requires_grad else None)
    return make_result(out, (a, b), backward)


def div(a, b) -> Tensor:
    a = as_tensor(a) if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    out = a.data / b.data

    def backward(g):
        return (unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None)
    return make_result(out, (a, b), backward)


def neg(x: Tensor) -> Tensor:
    return make_result(-x.data, (x,), lambda g: (-g,))


def square(x: Tensor) -> Tensor:
    return make_result(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = (x.data * cdf).astype(x.dtype)

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return ((g * (cdf + x.data * pdf)).astype(x.dtype),)
    return make_result(out, (x,), backward)


# ---------------------------------------------------------------- reductions

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=x.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)
    return make_result(out, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims), dtype=x.dtype)
    count = x.data.size // max(out.size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).astype(x.dtype),)
    return make_result(out, (x,), backward)


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return make_result(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(a % x.ndim for a in axes)
    inverse = tuple(np.argsort(axes))
    out = x.data.transpose(axes)
    return make_result(out, (x,), lambda g: (g.transpose(inverse),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise ShapeError(f"concat along axis {axis}: shapes {ref} and {t.shape} disagree off-axis")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        grads = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if not t.requires_grad:
                grads.append(None)
                continue
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            grads.append(g[tuple(idx)])
        return tuple(grads)
    return make_result(out, tensors, backward)


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g) if _is_advanced(index) else full.__setitem__(index, g)
        return (full,)
    return make_result(np.array(out, order="C"), (x,), backward)


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = np.ascontiguousarray(np.broadcast_to(x.data, shape))
    return make_result(out, (x,), lambda g: (unbroadcast(g, x.shape),))


def pad_constant(x: Tensor, pad_width, value: float = 0.0) -> Tensor:
    out = np.pad(x.data, pad_width, constant_values=value)
    index = tuple(slice(lo, lo + n) for (lo, _), n in zip(pad_width, x.shape))
    return make_result(out, (x,), lambda g: (g[index],))


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor, tag: str = "matmul") -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes.

    ``tag`` names the entry in the op counter (e.g. ``"attn_qk"``).
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: a axis -1 has {a.shape[-1]} but b axis -2 has {b.shape[-2]}")
    out = np.matmul(a.data, b.data)
    record_ops(tag, 2 * out.size * a.shape[-1])

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb
    return make_result(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as [out, in]."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input features (axis -1) {x.shape[-1]} != weight in-features {weight.shape[1]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data.T
    if bias is not None:
        out = out + bias.data
    record_ops("linear", 2 * x2.shape[0] * weight.shape[0] * weight.shape[1])
    out = out.reshape(lead + (weight.shape[0],))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, weight.shape[0])
        gx = (g2 @ weight.data).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if bias.requires_grad else None)
    return make_result(out, parents, backward)


# ---------------------------------------------------------------- normalisation / probability

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return make_result(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)
    return make_result(out, (x,), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(``logits``)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=1, keepdims=True)
    logp = shifted - np.log(z)
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        p = e / z
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)
    return make_result(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def layer_norm(x: Tensor, gamma: Optional[Tensor] = None, beta: Optional[Tensor] = None,
               eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis."""
    d = x.shape[-1]
    if gamma is not None and gamma.shape != (d,):
        raise ShapeError(f"layer_norm: gamma shape {gamma.shape} != ({d},)")
    if beta is not None and beta.shape != (d,):
        raise ShapeError(f"layer_norm: beta shape {beta.shape} != ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    parents = [x] + [p for p in (gamma, beta) if p is not None]

    def backward(g):
        gh = g * gamma.data if gamma is not None else g
        gx = None
        if x.requires_grad:
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        lead = tuple(range(g.ndim - 1))
        if gamma is not None:
            grads.append((g * xhat).sum(axis=lead) if gamma.requires_grad else None)
        if beta is not None:
            grads.append(g.sum(axis=lead) if beta.requires_grad else None)
        return tuple(grads)
    return make_result(out.astype(x.dtype), parents, backward)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation over every axis but 1.

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance); in eval mode the buffers are used.
    """
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batch_norm: {C} channels but gamma {gamma.shape}, beta {beta.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, C) + (1,) * (x.ndim - 2)
    if training:
        m = x.data.size // C
        mu = x.data.mean(axis=axes, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(C)
        unbiased = var.reshape(C) * (m / max(m - 1, 1))
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        xc = x.data - running_mean.reshape(bshape)
        var = running_var.reshape(bshape)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * inv
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        gh = g * gamma.data.reshape(bshape)
        gx = None
        if x.requires_grad:
            if training:
                gx = inv * (gh - gh.mean(axis=axes, keepdims=True)
                            - xhat * (gh * xhat).mean(axis=axes, keepdims=True))
            else:
                gx = gh * inv
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        return gx, gg, gb
    return make_result(out.astype(x.dtype), (x, gamma, beta), backward)


# ---------------------------------------------------------------- convolution / pooling

def conv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride=1, padding=0) -> Tensor:
    """3D cross-correlation of [N, C, T, H, W] with a [Cout, C, t, kh, kw] kernel."""
    st, sh, sw = _triple(stride)
    pt, ph, pw = _triple(padding)
    if x.ndim != 5:
        raise ShapeError(f"conv3d: input must be [N, C, T, H, W], got shape {x.shape}")
    if weight.ndim != 5:
        raise ShapeError(f"conv3d: kernel must be [Cout, Cin, t, kh, kw], got shape {weight.shape}")
    if min(st, sh, sw) < 1 or min(pt, ph, pw) < 0:
        raise ValueError(f"conv3d: stride {stride} must be >= 1 and padding {padding} >= 0")
    N, C, T, H, W = x.shape
    Co, Ci, kt, kh, kw = weight.shape
    if Ci != C:
        raise ShapeError(f"conv3d: input axis 1 (channels) is {C} but kernel axis 1 expects {Ci}")
    To, Ho, Wo = (T + 2 * pt - kt) // st + 1, (H + 2 * ph - kh) // sh + 1, (W + 2 * pw - kw) // sw + 1
    for axis, (name, n) in enumerate((("T", To), ("H", Ho), ("W", Wo)), start=2):
        if n < 1:
            raise ShapeError(f"conv3d: output axis {axis} ({name}) would have length {n}; "
                             f"input {x.shape}, kernel {weight.shape}, padding {padding}")
    if bias is not None and bias.shape != (Co,):
        raise ShapeError(f"conv3d: bias shape {bias.shape} != ({Co},)")

    pointwise = (kt, kh, kw) == (1, 1, 1) and (st, sh, sw) == (1, 1, 1) and (pt, ph, pw) == (0, 0, 0)
    if pointwise:
        cols = x.data.reshape(N, C, T * H * W)
        padded_shape = x.shape
    else:
        xp = x.data
        if pt or ph or pw:
            xp = np.pad(xp, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
        xp = np.ascontiguousarray(xp)
        padded_shape = xp.shape
        cols = kernels.im2col3d(xp, kt, kh, kw, st, sh, sw)
    w2 = weight.data.reshape(Co, -1)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[:, None]
    P = To * Ho * Wo
    record_ops("conv3d", 2 * N * Co * P * kt * kh * kw * C)
    out = out.reshape(N, Co, To, Ho, Wo)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(N, Co, P)
        gx = gw = None
        if weight.requires_grad:
            gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2)
            if pointwise:
                gx = gcols.reshape(x.shape)
            else:
                gxp = kernels.col2im3d(np.ascontiguousarray(gcols), padded_shape, kt, kh, kw, st, sh, sw)
                gx = gxp[:, :, pt:pt + T, ph:ph + H, pw:pw + W]
        if bias is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=(0, 2)) if bias.requires_grad else None)
    return make_result(out, parents, backward)


def max_pool3d(x: Tensor, kernel_size, stride=None, padding=0) -> Tensor:
    kt, kh, kw = _triple(kernel_size)
    st, sh, sw = _triple(stride if stride is not None else kernel_size)
    pt, ph, pw = _triple(padding)
    N, C, T, H, W = x.shape
    xp = x.data
    if pt or ph or pw:
        xp = np.pad(xp, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)), constant_values=-np.inf)
    xp = np.ascontiguousarray(xp)
    out, idx = kernels.maxpool3d_forward(xp, kt, kh, kw, st, sh, sw)

    def backward(g):
        gxp = kernels.maxpool3d_backward(np.ascontiguousarray(g), idx, xp.shape, kt, kh, kw, st, sh, sw)
        return (gxp[:, :, pt:pt + T, ph:ph + H, pw:pw + W],)
    return make_result(out, (x,), backward)


def avg_pool3d(x: Tensor, kernel_size, stride=None) -> Tensor:
    """Unpadded average pooling."""
    kt, kh, kw = _triple(kernel_size)
    st, sh, sw = _triple(stride if stride is not None else kernel_size)
    N, C, T, H, W = x.shape
    To, Ho, Wo = (T - kt) // st + 1, (H - kh) // sh + 1, (W - kw) // sw + 1
    if min(To, Ho, Wo) < 1:
        raise ShapeError(f"avg_pool3d: window {kernel_size} larger than input {x.shape}")
    scale = 1.0 / (kt * kh * kw)

    def window(a, dt, dy, dx):
        return a[:, :, dt:dt + st * (To - 1) + 1:st, dy:dy + sh * (Ho - 1) + 1:sh,
                 dx:dx + sw * (Wo - 1) + 1:sw]

    out = np.zeros((N, C, To, Ho, Wo), dtype=x.dtype)
    for dt in range(kt):
        for dy in range(kh):
            for dx in range(kw):
                out += window(x.data, dt, dy, dx)
    out *= scale

    def backward(g):
        gx = np.zeros_like(x.data)
        gs = g * scale
        for dt in range(kt):
            for dy in range(kh):
                for dx in range(kw):
                    window(gx, dt, dy, dx)[...] += gs
        return (gx,)
    return make_result(out, (x,), backward)


def upsample_nearest3d(x: Tensor, scale) -> Tensor:
    ft, fh, fw = _triple(scale)
    out = x.data
    for axis, f in ((2, ft), (3, fh), (4, fw)):
        if f != 1:
            out = np.repeat(out, f, axis=axis)
    N, C, T, H, W = x.shape

    def backward(g):
        return (g.reshape(N, C, T, ft, H, fh, W, fw).sum(axis=(3, 5, 7)),)
    return make_result(np.array(out, order="C"), (x,), backward)


# ---------------------------------------------------------------- Tensor sugar

def _radd(self, other):
    return add(_lift(other, self), self)


def _rsub(self, other):
    return sub(_lift(other, self), self)


def _rmul(self, other):
    return mul(_lift(other, self), self)


def _rtruediv(self, other):
    return div(_lift(other, self), self)


Tensor.__add__ = add
Tensor.__radd__ = _radd
Tensor.__sub__ = sub
Tensor.__rsub__ = _rsub
Tensor.__mul__ = mul
Tensor.__rmul__ = _rmul
Tensor.__truediv__ = div
Tensor.__rtruediv__ = _rtruediv
Tensor.__neg__ = neg
Tensor.__matmul__ = matmul
Tensor.__getitem__ = getitem
Tensor.reshape = lambda self, *shape: reshape(self, shape[0] if len(shape) == 1 and not isinstance(shape[0], int) else shape)
Tensor.transpose = lambda self, *axes: transpose(self, axes if axes else None)
Tensor.sum = lambda self, axis=None, keepdims=False: sum(self, axis, keepdims)
Tensor.mean = lambda self, axis=None, keepdims=False: mean(self, axis, keepdims)
Tensor.relu = relu
Tensor.gelu = gelu
Tensor.softmax = lambda self, axis=-1: softmax(self, axis)
