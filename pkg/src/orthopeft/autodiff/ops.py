"""Differentiable primitives.

Every function accepts Tensors (or array-likes for non-differentiable
operands) and returns a Tensor wired into the graph when any input requires
grad.
"""
from __future__ import annotations

import numpy as np

from .. import _kernels as K
from ..errors import DimensionError, InputError
from .tensor import Tensor, as_tensor


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)
    return Tensor._result(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = _pair(a, b)
    return Tensor._result(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a, b = _pair(a, b)
    return Tensor._result(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b):
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(out, (a, b), backward)


def neg(a):
    return Tensor._result(-a.data, (a,), lambda g: (-g,))


def scale(a, c):
    """Multiply by a python scalar (no graph node for the constant)."""
    c = a.data.dtype.type(c)
    return Tensor._result(a.data * c, (a,), lambda g: (g * c,))


def power(a, exponent):
    if isinstance(exponent, Tensor):
        raise TypeError("only constant exponents are supported")
    e = float(exponent)
    return Tensor._result(
        a.data ** e, (a,), lambda g: (g * (e * a.data ** (e - 1.0)),)
    )


def exp(a):
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,))


def log(a):
    return Tensor._result(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a):
    out = np.tanh(a.data)
    return Tensor._result(out, (a,), lambda g: (g * (1.0 - out * out),))


# -- shape ops -------------------------------------------------------------------

def reshape(a, shape):
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    src = a.shape
    return Tensor._result(out, (a,), lambda g: (g.reshape(src),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._result(
        a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),)
    )


def swapaxes(a, i, j):
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def index(a, idx):
    out = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._result(np.array(out, copy=True), (a,), backward)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._result(out, tuple(tensors), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return Tensor._result(
        out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis))
    )


# -- reductions -----------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._result(np.asarray(out), (a,), backward)


def mean(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum(a, axis, keepdims), 1.0 / n)


# -- linear algebra -----------------------------------------------------------

def matmul(a, b):
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    fold = a.ndim > 2 and b.ndim == 2
    if fold:
        # fold batch axes into rows: one GEMM instead of a batched product
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + b.shape[-1:])
    else:
        out = a.data @ b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            if fold:
                ga = (g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(a.shape)
            else:
                ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if fold:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return Tensor._result(out, (a, b), backward)


def linear(x, weight, bias=None):
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def frobenius_sq(m):
    """Sum of squared entries of a matrix."""
    if m.ndim != 2:
        raise DimensionError(f"frobenius_sq expects a matrix, got shape {m.shape}")
    out = np.asarray((m.data * m.data).sum())
    return Tensor._result(out, (m,), lambda g: (2.0 * g * m.data,))


# -- fused nonlinearities (row kernels) --------------------------------------

def gelu(x):
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    rows = K.as_rows(x.data)
    out = K.gelu_fwd(rows).reshape(x.shape)
    return Tensor._result(
        out, (x,), lambda g: (K.gelu_bwd(rows, K.as_rows(g)).reshape(x.shape),)
    )


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise DimensionError("layer_norm over an empty last axis")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm gain/bias must have shape ({d},)")
    rows = K.as_rows(x.data)
    y, xhat, rstd = K.layer_norm_fwd(rows, gain.data, bias.data, float(eps))

    def backward(g):
        dx, dgain, dbias = K.layer_norm_bwd(K.as_rows(g), xhat, rstd, gain.data)
        return dx.reshape(x.shape), dgain, dbias

    return Tensor._result(y.reshape(x.shape), (x, gain, bias), backward)


def softmax(x):
    """Softmax over the last axis."""
    y = K.softmax_fwd(K.as_rows(x.data))
    return Tensor._result(
        y.reshape(x.shape), (x,),
        lambda g: (K.softmax_bwd(y, K.as_rows(g)).reshape(x.shape),),
    )


def log_softmax(x):
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return Tensor._result(
        out, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),)
    )


def dropout(x, p, training, rng):
    """Inverted dropout: train mode zeroes with prob ``p`` and rescales by 1/(1-p)."""
    if not training or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise InputError(f"dropout probability must lie in [0, 1), got {p}")
    keep = 1.0 - p
    mask = (rng.random(x.shape) < keep).astype(x.dtype) / x.dtype.type(keep)
    return Tensor._result(x.data * mask, (x,), lambda g: (g * mask,))


# -- classification losses -------------------------------------------------------

def _check_labels(logits, labels):
    if logits.ndim not in (1, 2):
        raise DimensionError(f"logits must be rank 1 or 2, got shape {logits.shape}")
    batched = logits.ndim == 2
    lab = np.atleast_1d(np.asarray(labels))
    if not np.issubdtype(lab.dtype, np.integer):
        raise InputError("labels must be integer class indices")
    n = logits.shape[0] if batched else 1
    if lab.shape != (n,):
        raise InputError(f"expected {n} labels, got shape {lab.shape}")
    c = logits.shape[-1]
    if lab.min() < 0 or lab.max() >= c:
        raise InputError(f"label out of range [0, {c})")
    return lab, batched


def _softmax_parts(z):
    zz = z - z.max(axis=1, keepdims=True)
    logp = zz - np.log(np.exp(zz).sum(axis=1, keepdims=True))
    return logp, np.exp(logp)


def softmax_cross_entropy(logits, labels):
    """Mean over the batch of -log softmax(logits)[label]."""
    lab, batched = _check_labels(logits, labels)
    z = logits.data if batched else logits.data[None, :]
    logp, p = _softmax_parts(z)
    rows = np.arange(len(lab))
    n = len(lab)
    out = np.asarray(-logp[rows, lab].sum() / n, dtype=z.dtype)

    def backward(g):
        d = p.copy()
        d[rows, lab] -= 1.0
        d *= g / n
        return (d if batched else d[0],)

    return Tensor._result(out, (logits,), backward)


def focal_loss(logits, labels, gamma=2.0):
    """Mean over the batch of (1 - p_label)^gamma * (-log p_label)."""
    if gamma < 0:
        raise InputError("focal gamma must be >= 0")
    lab, batched = _check_labels(logits, labels)
    z = logits.data if batched else logits.data[None, :]
    logp, p = _softmax_parts(z)
    rows = np.arange(len(lab))
    n = len(lab)
    ce = -logp[rows, lab]
    pl = p[rows, lab]
    q = 1.0 - pl
    w = q ** gamma
    out = np.asarray((w * ce).sum() / n, dtype=z.dtype)

    def backward(g):
        if gamma == 0.0:
            factor = np.ones_like(pl)
        else:
            with np.errstate(divide="ignore", invalid="ignore"):
                extra = np.where(ce == 0.0, 0.0, gamma * q ** (gamma - 1.0) * pl * ce)
            factor = w + extra
        d = p.copy()
        d[rows, lab] -= 1.0
        d *= (factor * (g / n))[:, None]
        d = d.astype(z.dtype, copy=False)
        return (d if batched else d[0],)

    return Tensor._result(out, (logits,), backward)


def patchify(images, patch):
    """(B, H, W, C) images -> (B, H/p * W/p, p*p*C) patch rows, via reshape/transpose."""
    b, h, w, c = images.shape
    if h % patch or w % patch:
        raise DimensionError(f"image {h}x{w} not divisible by patch {patch}")
    x = reshape(images, (b, h // patch, patch, w // patch, patch, c))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (b, (h // patch) * (w // patch), patch * patch * c))

