"""Elementwise, reduction, shape and dense-algebra operations.

Shapes must match exactly for binary ops.  The only broadcasting allowed is a
plain Python/NumPy scalar constant, and the bias-style forms in :func:`linear`
and :func:`add_channel_bias`.
"""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, as_tensor, make_result


def _check_same(a, b, op):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _is_const(x):
    return not isinstance(x, Tensor)


def _const(x, like):
    c = np.asarray(x, dtype=like.dtype)
    if c.ndim and c.shape != like.shape:
        raise ValueError(f"constant of shape {c.shape} does not match tensor {like.shape}")
    return c


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b):
    if _is_const(a):
        a, b = b, a
    a = as_tensor(a)
    if _is_const(b):
        c = _const(b, a)
        return make_result(a.data + c, (a,), lambda g: (g,), "add_const")
    _check_same(a, b, "add")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    a = as_tensor(a)
    if _is_const(b):
        c = _const(b, a)
        return make_result(a.data - c, (a,), lambda g: (g,), "sub_const")
    _check_same(a, b, "sub")
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def neg(a):
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    if _is_const(a):
        a, b = b, a
    a = as_tensor(a)
    if _is_const(b):
        c = _const(b, a)
        return make_result(a.data * c, (a,), lambda g: (g * c,), "mul_const")
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def exp(a):
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    x = a.data
    return make_result(np.log(x), (a,), lambda g: (g / x,), "log")


def clamp(a, lo=None, hi=None):
    """Clip values; gradient passes only where the input was inside the range."""
    x = a.data
    out = np.clip(x, lo, hi)
    mask = np.ones(x.shape, dtype=bool)
    if lo is not None:
        mask &= x >= lo
    if hi is not None:
        mask &= x <= hi
    return make_result(out, (a,), lambda g: (g * mask,), "clamp")


def relu(a):
    x = a.data
    mask = x > 0  # subgradient 0 at exactly 0
    return make_result(np.where(mask, x, 0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a):
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return make_result(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def tanh(a):
    out = np.tanh(a.data)
    return make_result(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


# -- reductions ----------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum(a, axis=None):  # noqa: A001
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    keep = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def backward(g):
        return (np.broadcast_to(g.reshape(keep), shape).copy(),)

    return make_result(a.data.sum(axis=axes), (a,), backward, "sum")


def mean(a, axis=None):
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum(a, axes), 1.0 / count)


# -- shape manipulation ------------------------------------------------------

def reshape(a, shape):
    old = a.shape
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a, index):
    shape, dtype = a.shape, a.dtype

    idx = index if isinstance(index, tuple) else (index,)
    advanced = any(isinstance(i, (list, np.ndarray, Tensor)) for i in idx)

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return make_result(a.data[index], (a,), backward, "getitem")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis),
                       tensors, backward, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    for t in tensors[1:]:
        _check_same(tensors[0], t, "stack")

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return make_result(np.stack([t.data for t in tensors], axis=axis), tensors, backward, "stack")


# -- dense algebra -------------------------------------------------------------

def matmul(a, b):
    """2-D @ 2-D, 2-D @ 1-D or 1-D @ 2-D product; either side may be constant."""
    a_t, b_t = isinstance(a, Tensor), isinstance(b, Tensor)
    ad = a.data if a_t else np.asarray(a)
    bd = b.data if b_t else np.asarray(b)
    if ad.ndim not in (1, 2) or bd.ndim not in (1, 2):
        raise ValueError("matmul supports 1-D and 2-D operands only")
    if ad.shape[-1] != bd.shape[0]:
        raise ValueError(f"matmul: inner dimensions differ, {ad.shape} @ {bd.shape}")
    out = ad @ bd

    def backward(g):
        if ad.ndim == 2 and bd.ndim == 2:
            ga, gb = g @ bd.T, ad.T @ g
        elif ad.ndim == 2:
            ga, gb = np.outer(g, bd), ad.T @ g
        elif bd.ndim == 2:
            ga, gb = bd @ g, np.outer(ad, g)
        else:
            ga, gb = g * bd, g * ad
        return tuple(x for x, keep in ((ga, a_t), (gb, b_t)) if keep)

    parents = tuple(x for x in (a, b) if isinstance(x, Tensor))
    return make_result(out, parents, backward, "matmul")


def linear(x, weight, bias=None):
    """Affine map over the last axis: ``x @ weight.T + bias``."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(
            f"linear: input features {x.shape[-1]} != weight in-features {weight.shape[1]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    w = weight.data
    out = x2 @ w.T
    if bias is not None:
        if bias.shape != (w.shape[0],):
            raise ValueError(f"linear: bias shape {bias.shape} != ({w.shape[0]},)")
        out = out + bias.data

    def backward(g):
        g2 = g.reshape(-1, w.shape[0])
        grads = [(g2 @ w).reshape(x.shape), g2.T @ x2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out.reshape(lead + (w.shape[0],)), parents, backward, "linear")


def add_channel_bias(x, bias):
    """Add a per-channel vector along axis 0 of a ``[C, ...]`` tensor."""
    if bias.shape != (x.shape[0],):
        raise ValueError(f"bias shape {bias.shape} does not match {x.shape[0]} channels")
    bshape = (-1,) + (1,) * (x.ndim - 1)
    red = tuple(range(1, x.ndim))
    return make_result(x.data + bias.data.reshape(bshape), (x, bias),
                       lambda g: (g, g.sum(axis=red)), "add_channel_bias")


def softmax(a, axes=-1):
    """Max-subtracted softmax over ``axes`` (int or tuple)."""
    axes = _norm_axes(axes, a.ndim)
    x = a.data
    shifted = x - x.max(axis=axes, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axes, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axes, keepdims=True)),)

    return make_result(out, (a,), backward, "softmax")
