"""Residual multi-label classification and localization network.

Layout (channels ``c0..c3`` = ``base_channels`` times ``channel_mults``)::

    encoder   res(1->c0) | pool res(c0->c1) | pool res(c1->c2) | pool res(c2->c3) x3
    skips     1x1x1 conv on each of the four scale outputs
    decoder   start at skip3; (res, upsample, + skip) for scales 2, 1, 0
    head      3x3x3 conv + GN + ReLU, 1x1x1 conv to N heatmap logits
    classify  conv 5x3x3, conv 1x1x1, max-pool, z-sequence, 3 x Bi-LSTM, linear
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .integral import hard_argmax, soft_argmax

MODES = ("integral", "direct_fc", "heatmap_argmax")
CLS_HEADS = ("bilstm", "pool")


@dataclass
class ModelConfig:
    crop_shape: tuple = (32, 24, 24)
    num_classes: int = 26
    base_channels: int = 16
    channel_mults: tuple = (1, 2, 4, 8)
    lstm_hidden: int = 128
    lstm_layers: int = 3
    groups: int = 4
    mode: str = "integral"
    cls_channels: int = 32
    cls_head: str = "bilstm"
    dtype: str = "float64"

    def __post_init__(self):
        self.crop_shape = tuple(int(v) for v in self.crop_shape)
        self.channel_mults = tuple(int(v) for v in self.channel_mults)
        if len(self.crop_shape) != 3 or any(v % 8 for v in self.crop_shape):
            raise ValueError(f"crop extents must be divisible by 8, got {self.crop_shape}")
        if len(self.channel_mults) != 4:
            raise ValueError("channel_mults needs one entry per scale (4)")
        if self.base_channels % self.groups:
            raise ValueError(
                f"base_channels {self.base_channels} not divisible by groups {self.groups}")
        if self.mode not in MODES:
            raise ValueError(f"unknown localization mode {self.mode!r}; expected one of {MODES}")
        if self.cls_head not in CLS_HEADS:
            raise ValueError(f"unknown classification head {self.cls_head!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def channels(self):
        return tuple(self.base_channels * m for m in self.channel_mults)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# -- parameter containers ---------------------------------------------------------

class Module:
    """Holds parameters as attributes; submodules are discovered recursively."""

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(prefix + key + ".")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self):
        return sum(p.size for p in self.parameters())


def _param(values, dtype, name=None):
    return Tensor(np.asarray(values, dtype=dtype), requires_grad=True, name=name)


def _he_uniform(rng, shape, fan_in, dtype):
    bound = math.sqrt(6.0 / fan_in)
    return _param(rng.uniform(-bound, bound, size=shape), dtype)


class Conv(Module):
    def __init__(self, rng, c_in, c_out, kernel, dtype):
        kernel = (kernel,) * 3 if isinstance(kernel, int) else tuple(kernel)
        fan_in = c_in * int(np.prod(kernel))
        self.weight = _he_uniform(rng, (c_out, c_in) + kernel, fan_in, dtype)
        self.bias = _param(np.zeros(c_out), dtype)
        self.padding = tuple(k // 2 for k in kernel)

    def __call__(self, x):
        return ag.conv3d(x, self.weight, self.bias, padding=self.padding)


class GroupNorm(Module):
    def __init__(self, channels, groups, dtype):
        # groups must divide the channel count; bottleneck widths may be narrower than groups
        self.groups = math.gcd(groups, channels)
        self.gamma = _param(np.ones(channels), dtype)
        self.beta = _param(np.zeros(channels), dtype)

    def __call__(self, x):
        return ag.group_norm(x, self.groups, self.gamma, self.beta)


class Linear(Module):
    def __init__(self, rng, f_in, f_out, dtype):
        self.weight = _he_uniform(rng, (f_out, f_in), f_in, dtype)
        self.bias = _param(np.zeros(f_out), dtype)

    def __call__(self, x):
        return ag.linear(x, self.weight, self.bias)


class ResidualModule(Module):
    """1x1x1 reduce, 3x3x3, 1x1x1 expand, each followed by GN; ReLU after the
    first two and after the skip sum.  Spatial shape is preserved."""

    def __init__(self, rng, c_in, c_out, groups, dtype):
        mid = max(1, c_out // 2)
        self.c_in, self.c_out = c_in, c_out
        self.conv1 = Conv(rng, c_in, mid, 1, dtype)
        self.gn1 = GroupNorm(mid, groups, dtype)
        self.conv2 = Conv(rng, mid, mid, 3, dtype)
        self.gn2 = GroupNorm(mid, groups, dtype)
        self.conv3 = Conv(rng, mid, c_out, 1, dtype)
        self.gn3 = GroupNorm(c_out, groups, dtype)
        self.proj = Conv(rng, c_in, c_out, 1, dtype) if c_in != c_out else None

    def __call__(self, x):
        if x.shape[0] != self.c_in:
            raise ValueError(f"residual module expects {self.c_in} channels, got {x.shape[0]}")
        h = ag.relu(self.gn1(self.conv1(x)))
        h = ag.relu(self.gn2(self.conv2(h)))
        h = self.gn3(self.conv3(h))
        skip = x if self.proj is None else self.proj(x)
        return ag.relu(h + skip)


def residual_forward(x, module):
    return module(x)


class LSTMCell(Module):
    """Standard LSTM cell; the stacked weight rows are gates i, f, g, o."""

    def __init__(self, rng, f_in, hidden, dtype):
        k = 1.0 / math.sqrt(hidden)
        self.hidden = hidden
        self.weight = _param(rng.uniform(-k, k, size=(4 * hidden, f_in + hidden)), dtype)
        bias = np.zeros(4 * hidden)
        bias[hidden:2 * hidden] = 1.0
        self.bias = _param(bias, dtype)

    def __call__(self, x, h, c):
        z = ag.linear(ag.concat([x, h]), self.weight, self.bias)
        n = self.hidden
        i = ag.sigmoid(z[:n])
        f = ag.sigmoid(z[n:2 * n])
        g = ag.tanh(z[2 * n:3 * n])
        o = ag.sigmoid(z[3 * n:])
        c_new = f * c + i * g
        h_new = o * ag.tanh(c_new)
        return h_new, c_new


class BiLSTM(Module):
    def __init__(self, rng, f_in, hidden, dtype):
        self.fwd = LSTMCell(rng, f_in, hidden, dtype)
        self.bwd = LSTMCell(rng, f_in, hidden, dtype)

    def _run(self, cell, seq):
        zero = Tensor(np.zeros(cell.hidden, dtype=seq[0].dtype))
        h, c, outs = zero, zero, []
        for x in seq:
            h, c = cell(x, h, c)
            outs.append(h)
        return outs

    def __call__(self, seq):
        f = self._run(self.fwd, seq)
        b = self._run(self.bwd, seq[::-1])[::-1]
        return [ag.concat([hf, hb]) for hf, hb in zip(f, b)]


# -- the network --------------------------------------------------------------------

class Model(Module):
    def __init__(self, config: ModelConfig, seed=0):
        self.config = config
        dt = np.dtype(config.dtype)
        c0, c1, c2, c3 = config.channels
        g, n = config.groups, config.num_classes
        # independent streams so every mode/head shares identical encoder weights
        enc = np.random.default_rng([seed, 0])
        loc = np.random.default_rng([seed, 1])
        cls = np.random.default_rng([seed, 2])
        fc = np.random.default_rng([seed, 3])

        self.enc = [ResidualModule(enc, 1, c0, g, dt), ResidualModule(enc, c0, c1, g, dt),
                    ResidualModule(enc, c1, c2, g, dt), ResidualModule(enc, c2, c3, g, dt),
                    ResidualModule(enc, c3, c3, g, dt), ResidualModule(enc, c3, c3, g, dt)]
        self.skips = [Conv(enc, c, c, 1, dt) for c in (c0, c1, c2, c3)]

        if config.mode == "direct_fc":
            self.fc_head = Linear(fc, c3, 3 * n, dt)
            # start at the crop centre, like an untrained uniform heatmap
            d, h, w = config.crop_shape
            self.fc_head.bias.data[:] = np.tile([(w - 1) / 2, (h - 1) / 2, (d - 1) / 2], n)
        else:
            self.dec = [ResidualModule(loc, c3, c2, g, dt), ResidualModule(loc, c2, c1, g, dt),
                        ResidualModule(loc, c1, c0, g, dt)]
            self.head1 = Conv(loc, c0, c0, 3, dt)
            self.head_gn = GroupNorm(c0, g, dt)
            self.head2 = Conv(loc, c0, n, 1, dt)

        k = config.cls_channels
        self.cls_conv1 = Conv(cls, c3, k, (5, 3, 3), dt)
        self.cls_gn1 = GroupNorm(k, g, dt)
        self.cls_conv2 = Conv(cls, k, k, 1, dt)
        self.cls_gn2 = GroupNorm(k, g, dt)
        if config.cls_head == "bilstm":
            hid = config.lstm_hidden
            self.lstm = [BiLSTM(cls, k if i == 0 else 2 * hid, hid, dt)
                         for i in range(config.lstm_layers)]
            self.cls_fc = Linear(cls, 2 * hid, n, dt)
        else:
            self.cls_fc = Linear(cls, k, n, dt)

    def as_input(self, crop):
        """Wrap a ``[D,H,W]`` or ``[1,D,H,W]`` array as a model input tensor."""
        arr = crop.data if isinstance(crop, Tensor) else np.asarray(crop)
        if arr.ndim == 3:
            arr = arr[None]
        return Tensor(arr.astype(self.config.dtype, copy=False))


def encoder_forward(crop, model):
    """Skip-out features at scales 1, 1/2, 1/4, 1/8 and the deepest feature map."""
    cfg = model.config
    if crop.shape != (1,) + cfg.crop_shape:
        raise ValueError(f"crop shape {crop.shape} does not match config {(1,) + cfg.crop_shape}")
    feats = []
    x = model.enc[0](crop)
    feats.append(x)
    for s in (1, 2):
        x = model.enc[s](ag.maxpool3d(x))
        feats.append(x)
    x = ag.maxpool3d(x)
    for m in model.enc[3:]:
        x = m(x)
    feats.append(x)
    skips = [conv(f) for conv, f in zip(model.skips, feats)]
    return skips, x


def decode_features(scales, model):
    """Full-resolution decoder features before the two head convolutions."""
    x = scales[3]
    for dec, skip in zip(model.dec, (scales[2], scales[1], scales[0])):
        x = ag.upsample_nearest3d(dec(x)) + skip
    return x


def localization_forward(scales, model):
    """Raw ``[N, D, H, W]`` heatmap logits (no activation on the last conv)."""
    x = decode_features(scales, model)
    x = ag.relu(model.head_gn(model.head1(x)))
    return model.head2(x)


def classification_forward(deepest, model):
    """Multi-label logits ``[N]``; probabilities are ``sigmoid(logits)``."""
    x = ag.relu(model.cls_gn1(model.cls_conv1(deepest)))
    x = ag.relu(model.cls_gn2(model.cls_conv2(x)))
    window = tuple(min(2, n) for n in x.shape[1:])
    x = ag.maxpool3d(x, window)
    if x.shape[1] < 1:
        raise ValueError("classification branch: empty z sequence")
    # one feature vector per axial slice
    seq_t = ag.mean(x, axis=(2, 3))  # [K, Z]
    if model.config.cls_head == "pool":
        return model.cls_fc(ag.mean(seq_t, axis=1))
    seq = [seq_t[:, z] for z in range(seq_t.shape[1])]
    for layer in model.lstm:
        seq = layer(seq)
    return model.cls_fc(seq[-1])


def direct_fc_forward(deepest, model):
    pooled = ag.mean(deepest, axis=(1, 2, 3))
    return ag.reshape(model.fc_head(pooled), (model.config.num_classes, 3))


def model_forward(crop, model):
    """Returns ``(logits[N], loc)``; ``loc`` is coordinates ``[N, 3]`` for the
    integral and direct_fc modes, heatmap logits ``[N, D, H, W]`` otherwise."""
    mode = model.config.mode
    if mode not in MODES:
        raise ValueError(f"unknown localization mode {mode!r}")
    scales, deepest = encoder_forward(crop, model)
    logits = classification_forward(deepest, model)
    if mode == "direct_fc":
        return logits, direct_fc_forward(deepest, model)
    heat = localization_forward(scales, model)
    if mode == "integral":
        return logits, soft_argmax(heat)
    return logits, heat


def predict_coordinates(loc, mode):
    """Coordinates ``[N, 3]`` (x, y, z voxels) from a forward's ``loc`` output."""
    if mode == "heatmap_argmax":
        return hard_argmax(loc.data).data
    return loc.data
