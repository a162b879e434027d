"""Adam with decoupled weight decay, reduce-on-plateau schedule, checkpoints and
the epoch loop.

Checkpoint container (little-endian)::

    b"SPCKPT1\\n"  u32 version  u32 n_sections
    per section: u16 name_len, name (ascii), u64 payload_len, payload

Sections are ``meta`` (JSON: configs, epoch, scheduler, optimizer scalars,
RNG state), ``params``, ``adam_m`` and ``adam_v``.  Tensor sections hold a
u32 count followed by records ``u16 name_len, name, u8 dtype (4 = f32,
8 = f64), u8 ndim, u32 dims[ndim], raw data``.
"""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autograd as ag
from .losses import LossConfig, crop_losses
from .nn import Model, ModelConfig, model_forward

log = logging.getLogger(__name__)

CKPT_MAGIC = b"SPCKPT1\n"
CKPT_VERSION = 1
CSV_HEADER = ["epoch", "split", "loss_total", "loss_cls", "loss_reg", "lr"]


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.01
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    batch_size: int = 2
    patience: int = 5
    factor: float = 0.4
    min_lr: float = 1e-6
    threshold: float = 1e-4
    balance_B: float = 3.0
    lam: float = 0.4
    use_cls: bool = True
    use_reg: bool = True
    heatmap_sigma: float = 2.0

    def loss_config(self):
        return LossConfig(balance_B=self.balance_B, lam=self.lam, use_cls=self.use_cls,
                          use_reg=self.use_reg, heatmap_sigma=self.heatmap_sigma)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        out = {k: v for k, v in d.items() if k in names}
        if "betas" in out:
            out["betas"] = tuple(out["betas"])
        return cls(**out)


# -- optimizer -------------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float
    m: list
    v: list
    step: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4

    @classmethod
    def for_params(cls, params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
        return cls(lr, [np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params], 0, tuple(betas), eps, weight_decay)


def adam_step(params, state: OptimizerState, names=None):
    """One bias-corrected Adam update followed by decoupled decay ``p -= lr*wd*p``."""
    for i, p in enumerate(params):
        g = p.grad
        if g is None or not np.all(np.isfinite(g)):
            name = names[i] if names else f"#{i}"
            raise FloatingPointError(f"non-finite gradient in parameter {name} {p.shape}")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    lr = state.lr
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
        if state.weight_decay:
            p.data -= (lr * state.weight_decay) * p.data


@dataclass
class PlateauScheduler:
    lr: float
    patience: int = 5
    factor: float = 0.4
    min_lr: float = 1e-6
    threshold: float = 1e-4
    best: float = math.inf
    num_bad: int = 0
    history: list = field(default_factory=list)

    def step(self, val_loss):
        """Record a validation loss; returns the (possibly reduced) learning rate."""
        val_loss = float(val_loss)
        self.history.append(val_loss)
        if val_loss < self.best - self.threshold * abs(self.best) or self.best == math.inf:
            self.best = val_loss
            self.num_bad = 0
        else:
            self.num_bad += 1
            if self.num_bad >= self.patience:
                self.lr = max(self.min_lr, self.lr * self.factor)
                self.num_bad = 0
        return self.lr


def scheduler_step(val_loss, sched: PlateauScheduler):
    return sched.step(val_loss)


# -- checkpoints -----------------------------------------------------------------

@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    params: dict
    optimizer: OptimizerState | None = None
    scheduler: PlateauScheduler | None = None
    rng_state: dict | None = None
    epoch: int = 0

    def build_model(self):
        model = Model(self.model_config, seed=0)
        load_parameters(model, self.params)
        return model


def model_parameters(model):
    return {name: p.data.copy() for name, p in model.named_parameters()}


def load_parameters(model, params):
    own = dict(model.named_parameters())
    if set(own) != set(params):
        missing = sorted(set(own) ^ set(params))
        raise CheckpointError(f"parameter names do not match the model: {missing[:5]}")
    for name, p in own.items():
        if p.shape != params[name].shape:
            raise CheckpointError(f"{name}: shape {params[name].shape} != model {p.shape}")
        p.data[...] = params[name]


_DTYPE_CODE = {np.dtype("<f4"): 4, np.dtype("<f8"): 8}
_CODE_DTYPE = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def _pack_tensors(items):
    out = [struct.pack("<I", len(items))]
    for name, arr in items:
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        nb = name.encode("utf-8")
        out.append(struct.pack("<H", len(nb)) + nb)
        out.append(struct.pack("<BB", _DTYPE_CODE[dt], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, blob, what):
        self.blob, self.pos, self.what = blob, 0, what

    def take(self, n):
        if n < 0 or self.pos + n > len(self.blob):
            raise CheckpointError(f"{self.what}: truncated or corrupt data")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _unpack_tensors(payload, what):
    r = _Reader(payload, what)
    (count,) = r.unpack("<I")
    items = []
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _CODE_DTYPE:
            raise CheckpointError(f"{what}: unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}I")
        dt = _CODE_DTYPE[code]
        n = int(np.prod(shape)) * dt.itemsize
        arr = np.frombuffer(r.take(n), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        items.append((name, arr))
    if r.pos != len(payload):
        raise CheckpointError(f"{what}: trailing bytes")
    return items


def save_checkpoint(path, ckpt: Checkpoint):
    opt = ckpt.optimizer
    sched = ckpt.scheduler
    meta = {
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config.to_dict(),
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "scheduler": None if sched is None else asdict(sched),
        "optimizer": None if opt is None else {
            "lr": opt.lr, "step": opt.step, "betas": list(opt.betas), "eps": opt.eps,
            "weight_decay": opt.weight_decay},
    }
    names = list(ckpt.params)
    sections = [("meta", json.dumps(meta).encode("utf-8")),
                ("params", _pack_tensors([(n, ckpt.params[n]) for n in names]))]
    if opt is not None:
        sections.append(("adam_m", _pack_tensors(list(zip(names, opt.m)))))
        sections.append(("adam_v", _pack_tensors(list(zip(names, opt.v)))))
    body = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(sections))]
    for name, payload in sections:
        nb = name.encode("ascii")
        body.append(struct.pack("<H", len(nb)) + nb + struct.pack("<Q", len(payload)))
        body.append(payload)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(b"".join(body))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    r = _Reader(blob, str(path))
    r.take(len(CKPT_MAGIC))
    version, n_sections = r.unpack("<II")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    sections = {}
    for _ in range(n_sections):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("ascii", "replace")
        (plen,) = r.unpack("<Q")
        sections[name] = r.take(plen)
    if r.pos != len(blob):
        raise CheckpointError(f"{path}: trailing bytes after last section")
    if "meta" not in sections or "params" not in sections:
        raise CheckpointError(f"{path}: missing required sections")
    try:
        meta = json.loads(sections["meta"].decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt meta section ({exc})") from None
    params = dict(_unpack_tensors(sections["params"], f"{path}:params"))
    opt = None
    if meta.get("optimizer") is not None and "adam_m" in sections:
        o = meta["optimizer"]
        m = [a for _, a in _unpack_tensors(sections["adam_m"], f"{path}:adam_m")]
        v = [a for _, a in _unpack_tensors(sections["adam_v"], f"{path}:adam_v")]
        opt = OptimizerState(o["lr"], m, v, o["step"], tuple(o["betas"]), o["eps"], o["weight_decay"])
    sched = None
    if meta.get("scheduler") is not None:
        sched = PlateauScheduler(**meta["scheduler"])
    return Checkpoint(ModelConfig.from_dict(meta["model_config"]),
                      TrainConfig.from_dict(meta["train_config"]), params, opt, sched,
                      meta.get("rng_state"), meta.get("epoch", 0))


# -- training loop ------------------------------------------------------------------

@dataclass
class CropDataset:
    """Pre-sampled crops: lists of ``(array[D,H,W], CropTarget)``."""
    train: list
    val: list = field(default_factory=list)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    best: Checkpoint
    log: list


def evaluate_losses(model, samples, loss_cfg):
    """Mean ``(total, cls, reg)`` over samples without recording a tape."""
    if not samples:
        return (math.nan, math.nan, math.nan)
    sums = np.zeros(3)
    with ag.no_grad():
        for crop, target in samples:
            logits, loc = model_forward(model.as_input(crop), model)
            tot, c, r = crop_losses(logits, loc, target, model.config.mode, loss_cfg)
            sums += [tot.item(), c.item(), r.item()]
    return tuple(sums / len(samples))


class Trainer:
    """Owns the model, optimizer, scheduler and shuffling RNG of one run."""

    def __init__(self, model_config, train_config, seed=0, checkpoint=None):
        if checkpoint is not None:
            self.model = checkpoint.build_model()
            model_config, train_config = checkpoint.model_config, checkpoint.train_config
        else:
            self.model = Model(model_config, seed=seed)
        self.model_config = model_config
        self.cfg = train_config
        self.loss_cfg = train_config.loss_config()
        self.names = [n for n, _ in self.model.named_parameters()]
        self.params = self.model.parameters()
        self.rng = np.random.default_rng([seed, 99])
        if checkpoint is not None:
            self.opt = copy.deepcopy(checkpoint.optimizer)
            self.sched = copy.deepcopy(checkpoint.scheduler)
            if checkpoint.rng_state is not None:
                self.rng.bit_generator.state = checkpoint.rng_state
            self.epoch = checkpoint.epoch
        else:
            tc = train_config
            self.opt = OptimizerState.for_params(self.params, tc.lr, tc.betas, tc.adam_eps,
                                                 tc.weight_decay)
            self.sched = PlateauScheduler(tc.lr, tc.patience, tc.factor, tc.min_lr, tc.threshold)
            self.epoch = 0
        self.log = []

    def checkpoint(self):
        return Checkpoint(self.model_config, self.cfg, model_parameters(self.model),
                          copy.deepcopy(self.opt), copy.deepcopy(self.sched),
                          copy.deepcopy(self.rng.bit_generator.state), self.epoch)

    def train_step(self, batch):
        """Accumulate gradients over ``batch`` (mean of per-crop losses) and update."""
        self.model.zero_grad()
        sums = np.zeros(3)
        scale = 1.0 / len(batch)
        for crop, target in batch:
            logits, loc = model_forward(self.model.as_input(crop), self.model)
            tot, c, r = crop_losses(logits, loc, target, self.model_config.mode, self.loss_cfg)
            if not math.isfinite(tot.item()):
                raise TrainingDiverged(f"non-finite loss at epoch {self.epoch + 1}")
            (tot * scale).backward()
            sums += [tot.item(), c.item(), r.item()]
        adam_step(self.params, self.opt, self.names)
        return sums * scale

    def run_epoch(self, dataset: CropDataset):
        lr = self.opt.lr
        order = self.rng.permutation(len(dataset.train))
        bs = self.cfg.batch_size
        sums = np.zeros(3)
        for start in range(0, len(order), bs):
            batch = [dataset.train[i] for i in order[start:start + bs]]
            sums += self.train_step(batch) * len(batch)
        train_losses = sums / max(1, len(order))
        val_losses = evaluate_losses(self.model, dataset.val, self.loss_cfg)
        monitor = val_losses[0] if dataset.val else train_losses[0]
        self.opt.lr = self.sched.step(monitor)
        self.epoch += 1
        rows = [[self.epoch, "train", *map(float, train_losses), lr]]
        if dataset.val:
            rows.append([self.epoch, "val", *map(float, val_losses), lr])
        self.log.extend(rows)
        return monitor


def train(model_config, train_config, dataset, epochs, seed=0, out_dir=None, resume=None,
          callback=None) -> TrainResult:
    """Run ``epochs`` epochs; returns final and best-validation checkpoints plus the log.

    With ``out_dir`` the final/best checkpoints and ``losses.csv`` are written
    there.  On divergence the last good checkpoint is saved before raising.
    """
    trainer = Trainer(model_config, train_config, seed, checkpoint=resume)
    best = trainer.checkpoint()
    best_val = math.inf
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    for _ in range(epochs):
        good = trainer.checkpoint()
        try:
            monitor = trainer.run_epoch(dataset)
        except (TrainingDiverged, FloatingPointError) as exc:
            if out_dir is not None:
                save_checkpoint(os.path.join(out_dir, "last_good.ckpt"), good)
                write_loss_csv(os.path.join(out_dir, "losses.csv"), trainer.log)
            raise TrainingDiverged(str(exc)) from exc
        log.info("epoch %d: %s", trainer.epoch, trainer.log[-1])
        if monitor < best_val:
            best_val = monitor
            best = trainer.checkpoint()
        if callback is not None:
            callback(trainer)
    final = trainer.checkpoint()
    if out_dir is not None:
        save_checkpoint(os.path.join(out_dir, "final.ckpt"), final)
        save_checkpoint(os.path.join(out_dir, "best.ckpt"), best)
        write_loss_csv(os.path.join(out_dir, "losses.csv"), trainer.log)
    return TrainResult(final, best, trainer.log)


def write_loss_csv(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_HEADER)
        for epoch, split, tot, c, r, lr in rows:
            w.writerow([epoch, split, repr(float(tot)), repr(float(c)), repr(float(r)), repr(float(lr))])
