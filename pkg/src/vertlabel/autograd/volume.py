"""Volumetric network primitives on ``[C, D, H, W]`` tensors.

Convolution is an im2col gather followed by one matrix product; the
backward pass scatters column gradients back tap by tap.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import make_result


def _triple(v, name):
    t = (v, v, v) if np.isscalar(v) else tuple(int(x) for x in v)
    if len(t) != 3:
        raise ValueError(f"{name} must have 3 entries, got {v!r}")
    return t


def _out_extent(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def conv3d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of ``x[C_in,D,H,W]`` with ``weight[C_out,C_in,kd,kh,kw]``.

    Zero padding; output extent per axis is ``(n + 2p - k) // s + 1``.
    """
    stride = _triple(stride, "stride")
    padding = _triple(padding, "padding")
    if x.ndim != 4:
        raise ValueError(f"conv3d expects input [C,D,H,W], got shape {x.shape}")
    if weight.ndim != 5:
        raise ValueError(f"conv3d expects weight [C_out,C_in,kd,kh,kw], got {weight.shape}")
    c_in = x.shape[0]
    c_out, w_cin, *ksize = weight.shape
    if w_cin != c_in:
        raise ValueError(f"conv3d: input has {c_in} channels but weight expects {w_cin}")
    if bias is not None and bias.shape != (c_out,):
        raise ValueError(f"conv3d: bias shape {bias.shape} != ({c_out},)")
    if min(stride) < 1:
        raise ValueError(f"conv3d: stride must be >= 1, got {stride}")
    spatial = x.shape[1:]
    for n, k, p, ax in zip(spatial, ksize, padding, "DHW"):
        if k > n + 2 * p:
            raise ValueError(f"conv3d: kernel extent {k} exceeds padded input {n + 2 * p} on axis {ax}")
    out_sp = tuple(_out_extent(n, k, s, p) for n, k, s, p in zip(spatial, ksize, stride, padding))
    if min(out_sp) <= 0:
        raise ValueError(f"conv3d: zero-sized output {out_sp}")

    xd = x.data
    kvol = int(np.prod(ksize))
    wmat = weight.data.reshape(c_out, c_in * kvol)
    n_out = int(np.prod(out_sp))
    pointwise = kvol == 1 and stride == (1, 1, 1) and padding == (0, 0, 0)
    if pointwise:
        cols = xd.reshape(c_in, -1)
    else:
        pd, ph, pw = padding
        xp = np.pad(xd, ((0, 0), (pd, pd), (ph, ph), (pw, pw))) if any(padding) else xd
        win = sliding_window_view(xp, ksize, axis=(1, 2, 3))
        win = win[:, ::stride[0], ::stride[1], ::stride[2]]
        # [C_in, D', H', W', kd, kh, kw] -> [C_in, kd, kh, kw, D', H', W']
        cols = np.ascontiguousarray(win.transpose(0, 4, 5, 6, 1, 2, 3)).reshape(c_in * kvol, n_out)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape((c_out,) + out_sp)

    def backward(g):
        g2 = g.reshape(c_out, n_out)
        gw = (g2 @ cols.T).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gcols = wmat.T @ g2
            if pointwise:
                gx = gcols.reshape(x.shape)
            else:
                gcols = gcols.reshape((c_in,) + tuple(ksize) + out_sp)
                gxp = np.zeros((c_in,) + tuple(n + 2 * p for n, p in zip(spatial, padding)), dtype=xd.dtype)
                od, oh, ow = out_sp
                sd, sh, sw = stride
                for a in range(ksize[0]):
                    for b in range(ksize[1]):
                        for c in range(ksize[2]):
                            gxp[:, a:a + sd * (od - 1) + 1:sd,
                                b:b + sh * (oh - 1) + 1:sh,
                                c:c + sw * (ow - 1) + 1:sw] += gcols[:, a, b, c]
                pd, ph, pw = padding
                gx = gxp[:, pd:pd + spatial[0], ph:ph + spatial[1], pw:pw + spatial[2]]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=1))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "conv3d")


def maxpool3d(x, window=2, stride=None, return_indices=False):
    """Max over windows with floor semantics; ties go to the lowest linear index.

    With ``return_indices`` the flat argmax index (into ``x[c]``) of every
    output voxel is returned alongside the pooled tensor.
    """
    window = _triple(window, "window")
    stride = window if stride is None else _triple(stride, "stride")
    if x.ndim != 4:
        raise ValueError(f"maxpool3d expects [C,D,H,W], got shape {x.shape}")
    spatial = x.shape[1:]
    for n, k, ax in zip(spatial, window, "DHW"):
        if k > n:
            raise ValueError(f"maxpool3d: window {k} larger than input extent {n} on axis {ax}")
    if min(stride) < 1 or min(window) < 1:
        raise ValueError("maxpool3d: window and stride must be >= 1")
    c = x.shape[0]
    out_sp = tuple((n - k) // s + 1 for n, k, s in zip(spatial, window, stride))
    xd = x.data
    win = sliding_window_view(xd, window, axis=(1, 2, 3))[:, ::stride[0], ::stride[1], ::stride[2]]
    flat = win.reshape(c, *out_sp, -1)
    local = flat.argmax(axis=-1)  # first occurrence == lowest linear index in the window
    out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]

    # local window offset -> global flat index within a channel
    kd, kh, kw = window
    ld, rem = np.divmod(local, kh * kw)
    lh, lw = np.divmod(rem, kw)
    zi = np.arange(out_sp[0]).reshape(-1, 1, 1) * stride[0] + ld
    yi = np.arange(out_sp[1]).reshape(1, -1, 1) * stride[1] + lh
    xi = np.arange(out_sp[2]).reshape(1, 1, -1) * stride[2] + lw
    indices = (zi * spatial[1] + yi) * spatial[2] + xi

    def backward(g):
        gx = np.zeros((c, int(np.prod(spatial))), dtype=xd.dtype)
        rows = np.broadcast_to(np.arange(c).reshape(-1, 1, 1, 1), indices.shape)
        np.add.at(gx, (rows.ravel(), indices.ravel()), g.ravel())
        return (gx.reshape(x.shape),)

    result = make_result(out, (x,), backward, "maxpool3d")
    if return_indices:
        return result, indices
    return result


def upsample_nearest3d(x, factor=2):
    """Replicate each voxel into an ``f_d x f_h x f_w`` block."""
    factor = _triple(factor, "factor")
    if min(factor) < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    fd, fh, fw = factor
    c, d, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, None, :, None, :, None],
                          (c, d, fd, h, fh, w, fw)).reshape(c, d * fd, h * fh, w * fw)

    def backward(g):
        return (g.reshape(c, d, fd, h, fh, w, fw).sum(axis=(2, 4, 6)),)

    return make_result(out, (x,), backward, "upsample_nearest3d")


def group_norm(x, groups, gamma, beta, eps=1e-5):
    """Group normalization of ``x[C,D,H,W]`` with per-channel affine."""
    c = x.shape[0]
    if c % groups:
        raise ValueError(f"group_norm: {c} channels not divisible by {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"group_norm: gamma/beta must have shape ({c},)")
    xd = x.data.reshape(groups, -1)
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(x.shape)
    bshape = (c,) + (1,) * (x.ndim - 1)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    red = tuple(range(1, x.ndim))

    def backward(g):
        ggamma = (g * xhat).sum(axis=red)
        gbeta = g.sum(axis=red)
        dxhat = (g * gamma.data.reshape(bshape)).reshape(groups, -1)
        xh = xhat.reshape(groups, -1)
        gx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                    - xh * (dxhat * xh).mean(axis=1, keepdims=True))
        return gx.reshape(x.shape), ggamma, gbeta

    return make_result(out, (x, gamma, beta), backward, "group_norm")
