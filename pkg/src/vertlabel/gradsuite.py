"""Finite-difference gradient suite over every differentiable op and a tiny model.

Each case maps random 64-bit inputs to a tensor. The runner contracts it with
a fixed random probe, so every output entry matters, and compares backward
gradients against central differences.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .integral import soft_argmax
from .losses import CropTarget, LossConfig, classification_loss, crop_losses, localization_loss
from .nn import BiLSTM, LSTMCell, Model, ModelConfig, ResidualModule, model_forward

OP_TOL = 1e-4
MODEL_TOL = 1e-3
MODEL_ENTRIES = 16  # sampled entries per parameter tensor in the end-to-end check
# two GN groups: at 8^3 the deepest map is one voxel, and groups of two channels
# would normalize to a constant +-1 pattern that blocks the classification gradient
TINY_MODEL = ModelConfig(crop_shape=(8, 8, 8), num_classes=3, base_channels=4, lstm_hidden=4,
                         cls_channels=8, groups=2)


@dataclass
class GradResult:
    name: str
    error: float
    tol: float
    seconds: float

    @property
    def ok(self):
        return self.error < self.tol


def _scalarize(fn, rng):
    """Contract a tensor-valued ``fn`` with a fixed random probe."""
    out = fn()
    if out.size == 1:
        return fn
    probe = rng.normal(size=out.shape)
    return lambda: ag.sum(fn() * probe)


def _op_cases(rng):
    def t(*shape, lo=None, hi=None):
        data = rng.uniform(lo, hi, size=shape) if lo is not None else rng.normal(size=shape)
        return Tensor(data, requires_grad=True)

    a, b = t(3, 4), t(3, 4)
    yield "add", lambda: ag.add(a, b), [a, b]
    yield "sub", lambda: ag.sub(a, b), [a, b]
    yield "neg", lambda: ag.neg(a), [a]
    yield "mul", lambda: ag.mul(a, b), [a, b]
    yield "exp", lambda: ag.exp(a), [a]
    pos = t(3, 4, lo=0.5, hi=2.0)
    yield "log", lambda: ag.log(pos), [pos]

    # |x| >= 0.1 keeps the step from straddling the relu / clamp kinks
    kinked = rng.uniform(0.1, 1.0, size=(4, 5)) * rng.choice([-1.0, 1.0], size=(4, 5))
    k = Tensor(kinked, requires_grad=True)
    yield "clamp", lambda: ag.clamp(k, -0.45, 0.55), [k]
    yield "relu", lambda: ag.relu(k), [k]
    yield "sigmoid", lambda: ag.sigmoid(a), [a]
    yield "tanh", lambda: ag.tanh(a), [a]

    c = t(2, 3, 4)
    yield "sum", lambda: ag.sum(c, axis=(0, 2)), [c]
    yield "mean", lambda: ag.mean(c, axis=1), [c]
    yield "reshape", lambda: ag.reshape(c, (4, 6)), [c]
    yield "transpose", lambda: ag.transpose(c, (2, 0, 1)), [c]
    yield "getitem", lambda: c[1, :, 1:3], [c]
    yield "getitem_fancy", lambda: ag.getitem(c, (np.array([0, 1, 1]), 2)), [c]
    yield "concat", lambda: ag.concat([a, b], axis=1), [a, b]
    yield "stack", lambda: ag.stack([a, b], axis=0), [a, b]

    m1, m2 = t(3, 5), t(5, 2)
    yield "matmul", lambda: ag.matmul(m1, m2), [m1, m2]
    x, w, bias = t(5), t(4, 5), t(4)
    yield "linear", lambda: ag.linear(x, w, bias), [x, w, bias]
    vol, cb = t(3, 2, 3, 2), t(3)
    yield "add_channel_bias", lambda: ag.add_channel_bias(vol, cb), [vol, cb]
    yield "softmax", lambda: ag.softmax(vol, axes=(1, 2, 3)), [vol]

    xc, wc, bc = t(2, 5, 4, 5), t(3, 2, 3, 3, 3), t(3)
    yield "conv3d", lambda: ag.conv3d(xc, wc, bc, padding=1), [xc, wc, bc]
    yield "conv3d_stride2", lambda: ag.conv3d(xc, wc, bc, stride=2), [xc, wc, bc]
    wk = t(3, 2, 5, 3, 1)
    yield "conv3d_anisotropic", lambda: ag.conv3d(xc, wk, padding=(2, 1, 0)), [xc, wk]
    # distinct values 0.1 apart keep every pooling window's max unique under the step
    mp = Tensor(rng.permutation(2 * 4 * 4 * 6).reshape(2, 4, 4, 6) * 0.1, requires_grad=True)
    yield "maxpool3d", lambda: ag.maxpool3d(mp), [mp]
    up = t(2, 2, 3, 2)
    yield "upsample_nearest3d", lambda: ag.upsample_nearest3d(up), [up]
    gx, gg, gb = t(4, 3, 2, 3), t(4), t(4)
    yield "group_norm", lambda: ag.group_norm(gx, 2, gg, gb), [gx, gg, gb]
    hm = t(2, 3, 4, 3)
    yield "soft_argmax", lambda: soft_argmax(hm), [hm]

    cell = LSTMCell(rng, 3, 4, np.float64)
    xs, h0, c0 = t(3), t(4), t(4)

    def lstm_cell():
        h, c_ = cell(xs, h0, c0)
        return ag.concat([h, c_])
    yield "lstm_cell", lstm_cell, [xs, h0, c0, cell.weight, cell.bias]

    bi = BiLSTM(rng, 3, 2, np.float64)
    seq = [t(3) for _ in range(3)]
    yield "bilstm", lambda: ag.stack(bi(seq)), seq + bi.parameters()

    res = ResidualModule(rng, 2, 4, 2, np.float64)
    rx = t(2, 3, 3, 3)
    yield "residual_module", lambda: res(rx), [rx] + res.parameters()

    target = CropTarget([1, 0, 1], rng.uniform(0, 4, size=(3, 3)))
    probs = t(3, lo=0.1, hi=0.9)
    yield "classification_loss", lambda: classification_loss(probs, target), [probs]
    coords = Tensor(target.v + rng.uniform(-3, 3, size=(3, 3)), requires_grad=True)
    yield "localization_loss", lambda: localization_loss(coords, target), [coords]


def run_gradient_suite(seed=0, max_entries=None, include_model=True, model_entries=MODEL_ENTRIES):
    """Run every case; returns a list of :class:`GradResult`.

    Op cases probe every input entry unless ``max_entries`` caps them.  The
    end-to-end model check probes ``model_entries`` seeded entries of every
    parameter tensor (``None`` for all of them, which takes several minutes).
    """
    rng = np.random.default_rng(seed)
    results = []
    for name, fn, tensors in _op_cases(rng):
        t0 = time.perf_counter()
        errs = ag.check_gradients(_scalarize(fn, rng), tensors, max_entries=max_entries,
                                  rng=np.random.default_rng(seed))
        results.append(GradResult(name, max(errs.values()), OP_TOL, time.perf_counter() - t0))
    if include_model:
        results.append(tiny_model_gradcheck(seed, model_entries))
    return results


def tiny_model_gradcheck(seed=0, max_entries=MODEL_ENTRIES):
    """End-to-end check of the multi-task loss w.r.t. every model parameter."""
    model = Model(TINY_MODEL, seed=seed)
    rng = np.random.default_rng([seed, 7])
    x = model.as_input(rng.normal(size=TINY_MODEL.crop_shape))
    target = CropTarget([1, 0, 1], rng.uniform(0, 7, size=(3, 3)))

    def f():
        logits, coords = model_forward(x, model)
        return crop_losses(logits, coords, target, "integral", LossConfig())[0]

    t0 = time.perf_counter()
    errs = ag.check_gradients(f, model.parameters(), max_entries=max_entries,
                              rng=np.random.default_rng(seed))
    return GradResult("tiny_model_end_to_end", max(errs.values()), MODEL_TOL,
                      time.perf_counter() - t0)
