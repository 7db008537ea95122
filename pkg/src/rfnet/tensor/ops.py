"""Differentiable operations on :class:`~rfnet.tensor.core.Tensor`.

Feature maps use the single-sample ``C x H x W`` layout. Each op computes its
forward result with numpy and registers a closure returning one gradient per
operand (``None`` for operands that receive no gradient).
"""

from __future__ import annotations

import builtins
import functools
from typing import Optional, Sequence

import numpy as np

from .core import ShapeError, Tensor, as_tensor, make_result


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


def _pair(a, b):
    if isinstance(a, Tensor):
        b = as_tensor(b, like=a)
    else:
        b = as_tensor(b)
        a = as_tensor(a, like=b)
    _broadcast_shape(a, b)
    return a, b


# -- elementwise arithmetic ------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,))


def maximum(a, b) -> Tensor:
    """Elementwise maximum; ties send the gradient to the first operand."""
    a, b = _pair(a, b)
    take_a = a.data >= b.data

    def backward(g):
        return (_unbroadcast(np.where(take_a, g, 0), a.shape),
                _unbroadcast(np.where(take_a, 0, g), b.shape))

    return make_result(np.where(take_a, a.data, b.data), (a, b), backward)


# -- activations -----------------------------------------------------------

def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)
    # keep the open interval (0, 1) representable: saturated values move by at most one ulp
    one = d.dtype.type(1)
    out = np.clip(out, np.finfo(d.dtype).tiny, np.nextafter(one, d.dtype.type(0)))
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), backward)


# -- shape manipulation ----------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.shape}")
    return make_result(x.data.T, (x,), lambda g: (g.T,))


def getitem(x: Tensor, index) -> Tensor:
    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return make_result(np.array(x.data[index]), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat shape mismatch: {ref} vs {t.shape} on axis {axis}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


# -- reductions ------------------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def amax(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Maximum reduction; the gradient is shared equally among tied maxima."""
    peak = x.data.max(axis=axis, keepdims=True)
    hit = (x.data == peak).astype(x.dtype)
    hit /= hit.sum(axis=axis, keepdims=True)
    out = peak if keepdims else np.squeeze(peak, axis=axis) if axis is not None else peak.reshape(())

    def backward(g):
        g = np.asarray(g)
        if not keepdims:
            g = np.expand_dims(g, axis) if axis is not None else g.reshape((1,) * x.ndim)
        return (hit * g,)

    return make_result(np.array(out), (x,), backward)


def amin(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return neg(amax(neg(x), axis=axis, keepdims=keepdims))


# -- linear algebra --------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return make_result(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``weight @ x + bias`` for a vector ``x`` of shape (in,); returns (out,)."""
    y = reshape(matmul(weight, reshape(x, (x.shape[0], 1))), (weight.shape[0],))
    return y if bias is None else add(y, bias)


# -- convolution -----------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """Direct cross-correlation of a ``C x H x W`` map with a ``K x C x kh x kw`` kernel."""
    if x.ndim != 3 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects C x H x W input and 4-D weight, got {x.shape}, {weight.shape}")
    C, H, W = x.shape
    K, Cw, kh, kw = weight.shape
    if Cw != C:
        raise ShapeError(f"conv2d channel mismatch: input has {C}, weight expects {Cw}")
    Ho = conv_output_size(H, kh, stride, padding, dilation)
    Wo = conv_output_size(W, kw, stride, padding, dilation)
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"conv2d output would be empty for input {x.shape}")

    if padding:
        xp = np.zeros((C, H + 2 * padding, W + 2 * padding), dtype=x.dtype)
        xp[:, padding:padding + H, padding:padding + W] = x.data
    else:
        xp = x.data
    cols = np.empty((C, kh, kw, Ho, Wo), dtype=x.dtype)
    for i in range(kh):
        r0 = i * dilation
        for j in range(kw):
            c0 = j * dilation
            cols[:, i, j] = xp[:, r0:r0 + stride * (Ho - 1) + 1:stride, c0:c0 + stride * (Wo - 1) + 1:stride]
    cols2 = cols.reshape(C * kh * kw, Ho * Wo)
    w2 = weight.data.reshape(K, -1)
    out = w2 @ cols2
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(K, Ho, Wo)

    def backward(g):
        g2 = g.reshape(K, Ho * Wo)
        gw = (g2 @ cols2.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (w2.T @ g2).reshape(C, kh, kw, Ho, Wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                r0 = i * dilation
                for j in range(kw):
                    c0 = j * dilation
                    gxp[:, r0:r0 + stride * (Ho - 1) + 1:stride, c0:c0 + stride * (Wo - 1) + 1:stride] += gcols[:, i, j]
            gx = gxp[:, padding:padding + H, padding:padding + W] if padding else gxp
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_result(out, parents, backward)


# -- pooling ---------------------------------------------------------------

def global_avg_pool(f: Tensor) -> Tensor:
    """C x H x W -> C, mean over all spatial positions."""
    return mean(reshape(f, (f.shape[0], -1)), axis=1)


def global_max_pool(f: Tensor) -> Tensor:
    """C x H x W -> C, max over all spatial positions."""
    return amax(reshape(f, (f.shape[0], -1)), axis=1)


def channel_avg_pool(f: Tensor) -> Tensor:
    """C x H x W -> 1 x H x W, mean over channels."""
    return mean(f, axis=0, keepdims=True)


def channel_max_pool(f: Tensor) -> Tensor:
    """C x H x W -> 1 x H x W, max over channels."""
    return amax(f, axis=0, keepdims=True)


def spatial_max_pool(f: Tensor, kernel: int = 2, stride: int = 2) -> Tensor:
    C, H, W = f.shape
    Ho = (H - kernel) // stride + 1
    Wo = (W - kernel) // stride + 1
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"max pool window {kernel} larger than input {f.shape}")
    windows = np.empty((kernel * kernel, C, Ho, Wo), dtype=f.dtype)
    for i in range(kernel):
        for j in range(kernel):
            windows[i * kernel + j] = f.data[:, i:i + stride * (Ho - 1) + 1:stride,
                                             j:j + stride * (Wo - 1) + 1:stride]
    arg = windows.argmax(axis=0)
    out = np.take_along_axis(windows, arg[None], axis=0)[0]

    def backward(g):
        gx = np.zeros_like(f.data)
        for k in range(kernel * kernel):
            i, j = divmod(k, kernel)
            gx[:, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride] += g * (arg == k)
        return (gx,)

    return make_result(out, (f,), backward)


@functools.lru_cache(maxsize=64)
def _bilinear_matrix(in_size: int, out_size: int, dtype) -> np.ndarray:
    # half-pixel centres, edge-clamped
    m = np.zeros((out_size, in_size), dtype=dtype)
    scale = in_size / out_size
    for o in range(out_size):
        src = builtins.max((o + 0.5) * scale - 0.5, 0.0)
        lo = builtins.min(int(np.floor(src)), in_size - 1)
        hi = builtins.min(lo + 1, in_size - 1)
        t = src - lo
        m[o, lo] += 1.0 - t
        m[o, hi] += t
    m.flags.writeable = False
    return m


def upsample_bilinear(f: Tensor, out_h: int, out_w: int) -> Tensor:
    C, H, W = f.shape
    mh = _bilinear_matrix(H, out_h, np.dtype(f.dtype))
    mw = _bilinear_matrix(W, out_w, np.dtype(f.dtype))
    out = mh @ f.data @ mw.T

    def backward(g):
        return (mh.T @ g @ mw,)

    return make_result(out, (f,), backward)


# -- losses ----------------------------------------------------------------

def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Mean binary cross-entropy in the overflow-free log-sum-exp form."""
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ShapeError(f"target shape {t.shape} != logits shape {logits.shape}")
    z = logits.data
    per_pixel = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray(per_pixel.mean(), dtype=z.dtype)
    n = z.size

    def backward(g):
        p = sigmoid(Tensor(z)).data
        return (g * (p - t) / n,)

    return make_result(out, (logits,), backward)
