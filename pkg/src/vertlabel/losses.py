"""Joint multi-label classification and centroid regression objective."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .autograd.tensor import make_result


@dataclass
class LossConfig:
    balance_B: float = 3.0
    lam: float = 0.4
    eps: float = 1e-7
    use_cls: bool = True
    use_reg: bool = True
    heatmap_sigma: float = 2.0

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if not 2.0 <= self.balance_B <= 4.0:
            warnings.warn(f"balance factor B={self.balance_B} outside the usual 2-4 range",
                          stacklevel=2)


@dataclass
class CropTarget:
    """Presence flags ``u[N]`` and crop-local voxel centroids ``v[N, 3]`` as (x, y, z).

    Rows of ``v`` for absent classes are zero and never read.
    """
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64).reshape(-1, 3)
        if self.u.shape[0] != self.v.shape[0]:
            raise ValueError("u and v disagree on the number of classes")

    @property
    def num_classes(self):
        return self.u.shape[0]


def classification_loss(probs, target, cfg=LossConfig()):
    """``sum_{u=1} -B log p - sum_{u=0} log(1 - p)`` with ``p`` clamped to ``[eps, 1-eps]``."""
    if probs.shape != (target.num_classes,):
        raise ValueError(f"got {probs.shape[0]} probabilities for {target.num_classes} classes")
    p = ag.clamp(probs, cfg.eps, 1 - cfg.eps)
    u = target.u.astype(p.dtype)
    pos = ag.log(p) * (-cfg.balance_B * u)
    neg = ag.log(1.0 - p) * (-(1.0 - u))
    return ag.sum(pos + neg)


def smooth_l1(x):
    """Huber-style penalty on a real number or array."""
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    out = np.where(ax < 1, 0.5 * x * x, ax - 0.5)
    return out.item() if out.ndim == 0 else out


def smooth_l1_tensor(x):
    xd = x.data
    ax = np.abs(xd)
    inside = ax < 1
    out = np.where(inside, 0.5 * xd * xd, ax - 0.5)
    return make_result(out, (x,), lambda g: (g * np.where(inside, xd, np.sign(xd)),), "smooth_l1")


def localization_loss(pred_coords, target, cfg=LossConfig()):
    """``lambda * sum_n sum_i u_n * smooth_l1(t_i - pred_i)``; absent rows are masked out."""
    if pred_coords.shape != (target.num_classes, 3):
        raise ValueError(f"predicted coords {pred_coords.shape} vs {target.num_classes} classes")
    if np.isnan(pred_coords.data).any():
        raise ValueError("NaN in predicted coordinates")
    mask = np.repeat(target.u[:, None], 3, axis=1).astype(pred_coords.dtype)
    t = np.where(mask > 0, target.v, 0.0).astype(pred_coords.dtype)
    # masking before the penalty keeps absent rows at exactly zero value and gradient
    resid = (ag.neg(pred_coords) + t) * mask
    return ag.sum(smooth_l1_tensor(resid)) * cfg.lam


def total_loss(l_cls, l_reg):
    return l_cls + l_reg


def gaussian_heatmaps(target, shape, sigma, dtype=np.float64):
    """Unit-peak Gaussian target per present class; zero maps for absent ones."""
    d, h, w = shape
    z, y, x = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    maps = np.zeros((target.num_classes, d, h, w), dtype=dtype)
    for n in np.flatnonzero(target.u):
        cx, cy, cz = target.v[n]
        r2 = (x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2
        maps[n] = np.exp(-r2 / (2 * sigma * sigma))
    return maps


def heatmap_mse_loss(heatmaps, target, cfg=LossConfig()):
    """Per-voxel squared error against Gaussian targets (heatmap ablation only).

    Summed over voxels and present channels, then scaled by ``lam``.
    """
    goal = gaussian_heatmaps(target, heatmaps.shape[1:], cfg.heatmap_sigma, heatmaps.dtype)
    mask = np.broadcast_to(target.u[:, None, None, None], heatmaps.shape).astype(heatmaps.dtype)
    diff = (heatmaps - goal) * mask
    return ag.sum(diff * diff) * cfg.lam


def crop_losses(logits, loc, target, mode, cfg=LossConfig()):
    """``(total, cls, reg)`` for one crop under the given localization mode."""
    zero = Tensor(np.zeros((), dtype=logits.dtype))
    l_cls = classification_loss(ag.sigmoid(logits), target, cfg) if cfg.use_cls else zero
    if not cfg.use_reg:
        l_reg = zero
    elif mode == "heatmap_argmax":
        l_reg = heatmap_mse_loss(loc, target, cfg)
    else:
        l_reg = localization_loss(loc, target, cfg)
    return total_loss(l_cls, l_reg), l_cls, l_reg
