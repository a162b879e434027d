"""Integral regression: heatmap logits to centroid coordinates.

Each channel of a ``[N, D, H, W]`` logit stack is softmax-normalized over all
of its voxels and the resulting probability map is used to weight a grid of
voxel coordinates.  Coordinates come out as ``(x, y, z)`` in crop-local voxel
units with the first voxel centre at the origin.  The module owns no
trainable parameters.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import autograd as ag
from .autograd import Tensor


@lru_cache(maxsize=32)
def _grid(shape, dtype_name):
    d, h, w = shape
    z, y, x = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    grid = np.stack([x, y, z], axis=-1).astype(dtype_name)
    grid.setflags(write=False)
    return grid


def coordinate_grid(shape, dtype=np.float64):
    """``[D, H, W, 3]`` array whose entry at voxel (z, y, x) is (x, y, z)."""
    return _grid(tuple(int(s) for s in shape), np.dtype(dtype).name)


def normalize_heatmap(y):
    """Per-channel softmax over all voxels of ``y[N, D, H, W]``."""
    if y.ndim != 4:
        raise ValueError(f"heatmaps must be [N,D,H,W], got shape {y.shape}")
    return ag.softmax(y, axes=(1, 2, 3))


def integrate_coordinates(p, grid=None):
    """Expected ``(x, y, z)`` of each normalized map in ``p[N, D, H, W]``."""
    n, d, h, w = p.shape
    if grid is None:
        grid = coordinate_grid((d, h, w), p.dtype)
    if grid.shape != (d, h, w, 3):
        raise ValueError(f"grid shape {grid.shape} does not match maps {(d, h, w)}")
    flat = ag.reshape(p, (n, d * h * w))
    return ag.matmul(flat, grid.reshape(d * h * w, 3))


def soft_argmax(y):
    """Differentiable centroid estimate of each heatmap channel, ``[N, 3]``."""
    return integrate_coordinates(normalize_heatmap(y))


def hard_argmax(y):
    """Argmax voxel of each channel as ``(x, y, z)``; ties go to the lowest linear index.

    Inference only.  If ``y`` tracks gradients the result does too, but
    calling ``backward`` through it raises.
    """
    data = y.data if isinstance(y, Tensor) else np.asarray(y)
    n, d, h, w = data.shape
    flat = data.reshape(n, -1).argmax(axis=1)
    z, rem = np.divmod(flat, h * w)
    yy, x = np.divmod(rem, w)
    coords = np.stack([x, yy, z], axis=1).astype(data.dtype)
    if not isinstance(y, Tensor):
        return Tensor(coords)

    def refuse(_g):
        raise RuntimeError("hard_argmax is not differentiable; train heatmap mode with a heatmap loss")

    return ag.tensor.make_result(coords, (y,), refuse, "hard_argmax")
