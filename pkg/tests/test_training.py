import csv
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vertlabel.autograd import Tensor
from vertlabel.gradsuite import TINY_MODEL
from vertlabel.losses import CropTarget
from vertlabel.nn import Model, ModelConfig
from vertlabel.training import (CheckpointError, CropDataset, OptimizerState, PlateauScheduler,
                                TrainConfig, Trainer, TrainingDiverged, adam_step,
                                load_checkpoint, model_parameters, save_checkpoint,
                                scheduler_step, train)

TINY = ModelConfig(crop_shape=(8, 8, 8), num_classes=3, base_channels=4, lstm_hidden=4,
                   cls_channels=8)


def _crops(n, shape=(8, 8, 8), seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        u = rng.integers(0, 2, size=3).astype(float)
        v = rng.uniform(0, min(shape) - 1, size=(3, 3)) * u[:, None]
        out.append((rng.normal(size=shape), CropTarget(u, v)))
    return out


@pytest.fixture(scope="module")
def dataset():
    return CropDataset(_crops(4), _crops(2, seed=1))


# -- Adam ------------------------------------------------------------------------------------

def _scalar_param(value, grad):
    p = Tensor(np.array([value]), requires_grad=True)
    p.grad = np.array([grad])
    return p


def test_adam_zero_gradient_no_decay_is_noop():
    p = _scalar_param(1.5, 0.0)
    adam_step([p], OptimizerState.for_params([p], 0.1, weight_decay=0.0))
    assert p.data[0] == 1.5


def test_adam_first_step_is_lr_times_sign():
    p = _scalar_param(1.0, 1.0)
    adam_step([p], OptimizerState.for_params([p], 0.1, weight_decay=0.0))
    # m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
    assert p.data[0] == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-15)
    assert p.data[0] == pytest.approx(0.9, abs=1e-8)


def test_adam_decay_only():
    p = _scalar_param(1.0, 0.0)
    adam_step([p], OptimizerState.for_params([p], 0.1, weight_decay=0.1))
    assert p.data[0] == pytest.approx(0.99, abs=1e-15)


def test_adam_two_steps_hand_evaluated():
    p = _scalar_param(0.0, 2.0)
    st_ = OptimizerState.for_params([p], 0.01, weight_decay=0.0)
    adam_step([p], st_)
    p.grad = np.array([-1.0])
    adam_step([p], st_)
    m = 0.9 * 0.2 + 0.1 * -1.0
    v = 0.999 * 0.004 + 0.001 * 1.0
    step2 = 0.01 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    expected = -0.01 * 1.0 / (1.0 + 0.5e-8) - step2
    assert p.data[0] == pytest.approx(expected, abs=1e-15)


def test_adam_nan_gradient_names_parameter():
    good = _scalar_param(1.0, 0.1)
    bad = _scalar_param(1.0, np.nan)
    state = OptimizerState.for_params([good, bad], 0.1)
    with pytest.raises(FloatingPointError, match="head.weight"):
        adam_step([good, bad], state, ["enc.bias", "head.weight"])
    assert good.data[0] == 1.0 and state.step == 0


# -- scheduler ----------------------------------------------------------------------------------

def test_scheduler_decreasing_losses_keep_lr():
    s = PlateauScheduler(0.01)
    for loss in np.linspace(10, 1, 30):
        assert scheduler_step(loss, s) == 0.01


def test_scheduler_plateau_reduces_lr():
    s = PlateauScheduler(0.01, patience=5)
    lrs = [scheduler_step(1.0, s) for _ in range(6)]
    assert lrs[:5] == [0.01] * 5
    assert lrs[5] == pytest.approx(0.004, abs=1e-15)


def test_scheduler_tiny_improvement_counts_as_plateau():
    s = PlateauScheduler(0.01, patience=2)
    for loss in (1.0, 1.0 - 1e-6, 1.0 - 2e-6):
        scheduler_step(loss, s)
    assert s.lr == pytest.approx(0.004)


def test_scheduler_floor():
    s = PlateauScheduler(1e-6, patience=1)
    for _ in range(10):
        assert scheduler_step(3.0, s) == 1e-6


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=1, max_size=60))
def test_scheduler_monotone_with_floor(losses):
    s = PlateauScheduler(0.01, patience=2)
    prev = s.lr
    for loss in losses:
        lr = scheduler_step(loss, s)
        assert 1e-6 <= lr <= prev
        prev = lr


# -- training loop ------------------------------------------------------------------------------

def test_zero_epochs_returns_initialization(dataset):
    res = train(TINY, TrainConfig(), dataset, 0, seed=5)
    init = model_parameters(Model(TINY, seed=5))
    assert res.log == []
    for k, v in init.items():
        assert np.array_equal(res.checkpoint.params[k], v)


def test_rerun_is_bitwise_identical(dataset):
    a = train(TINY, TrainConfig(lr=1e-3), dataset, 3, seed=2)
    b = train(TINY, TrainConfig(lr=1e-3), dataset, 3, seed=2)
    assert a.log == b.log
    assert len(a.log) == 6


def test_overfit_two_crops():
    rng = np.random.default_rng(0)
    crops = [(rng.normal(size=(8, 8, 8)), CropTarget([1, 0, 1], [[1.5, 2, 3], [0, 0, 0], [5, 4.5, 6]])),
             (rng.normal(size=(8, 8, 8)), CropTarget([0, 1, 0], [[0, 0, 0], [3, 3, 2], [0, 0, 0]]))]
    trainer = Trainer(TINY_MODEL, TrainConfig(lr=3e-3), seed=0)
    first = trainer.train_step(crops)[0]
    for _ in range(199):
        last = trainer.train_step(crops)[0]
    assert last < 0.05 * first


def test_both_heads_receive_gradient():
    trainer = Trainer(TINY, TrainConfig(), seed=0)
    crop = _crops(1)[0][0]
    trainer.model.zero_grad()
    from vertlabel.losses import crop_losses
    from vertlabel.nn import model_forward
    logits, loc = model_forward(trainer.model.as_input(crop), trainer.model)
    target = CropTarget([1, 0, 0], [[2.0, 3.0, 4.0], [0, 0, 0], [0, 0, 0]])
    crop_losses(logits, loc, target, "integral", trainer.loss_cfg)[0].backward()
    grads = {n: np.linalg.norm(p.grad) for n, p in trainer.model.named_parameters()}
    assert grads["cls_fc.weight"] > 0
    assert grads["head2.weight"] > 0
    assert grads["enc.0.conv1.weight"] > 0


def test_loss_csv_and_checkpoints_written(tmp_path, dataset):
    train(TINY, TrainConfig(lr=1e-3), dataset, 2, out_dir=tmp_path)
    rows = list(csv.reader(open(tmp_path / "losses.csv")))
    assert rows[0] == ["epoch", "split", "loss_total", "loss_cls", "loss_reg", "lr"]
    assert [r[:2] for r in rows[1:]] == [["1", "train"], ["1", "val"], ["2", "train"], ["2", "val"]]
    for r in rows[1:]:
        assert float(r[2]) == pytest.approx(float(r[3]) + float(r[4]), rel=1e-9)
    assert (tmp_path / "final.ckpt").exists() and (tmp_path / "best.ckpt").exists()


def test_divergence_saves_last_good(tmp_path):
    crops = _crops(2)
    crops[1] = (np.full((8, 8, 8), np.nan), crops[1][1])
    with pytest.raises(TrainingDiverged):
        train(TINY, TrainConfig(), CropDataset(crops), 3, out_dir=tmp_path)
    ck = load_checkpoint(tmp_path / "last_good.ckpt")
    assert ck.epoch == 0
    assert all(np.all(np.isfinite(v)) for v in ck.params.values())


# -- checkpoints ----------------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, dataset):
    res = train(TINY, TrainConfig(lr=1e-3), dataset, 1, seed=1)
    save_checkpoint(tmp_path / "a.ckpt", res.checkpoint)
    back = load_checkpoint(tmp_path / "a.ckpt")
    assert back.model_config == TINY
    assert back.epoch == 1
    for k, v in res.checkpoint.params.items():
        assert back.params[k].dtype == v.dtype and back.params[k].tobytes() == v.tobytes()
    for a, b in zip(res.checkpoint.optimizer.v, back.optimizer.v):
        assert a.tobytes() == b.tobytes()
    assert back.scheduler == res.checkpoint.scheduler
    assert back.rng_state == res.checkpoint.rng_state


def test_resume_matches_uninterrupted(tmp_path, dataset):
    cfg = TrainConfig(lr=1e-3)
    full = train(TINY, cfg, dataset, 3, seed=4)
    part = train(TINY, cfg, dataset, 1, seed=4)
    save_checkpoint(tmp_path / "mid.ckpt", part.checkpoint)
    rest = train(TINY, cfg, dataset, 2, seed=4, resume=load_checkpoint(tmp_path / "mid.ckpt"))
    assert part.log + rest.log == full.log
    for k, v in full.checkpoint.params.items():
        assert np.array_equal(rest.checkpoint.params[k], v)


def test_checkpoint_corruption(tmp_path, dataset):
    res = train(TINY, TrainConfig(), dataset, 0)
    save_checkpoint(tmp_path / "a.ckpt", res.checkpoint)
    raw = bytearray((tmp_path / "a.ckpt").read_bytes())

    (tmp_path / "magic.ckpt").write_bytes(b"XXXXXXX\n" + raw[8:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "magic.ckpt")

    ver = raw.copy()
    ver[8:12] = struct.pack("<I", 7)
    (tmp_path / "ver.ckpt").write_bytes(bytes(ver))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "ver.ckpt")

    # first section header: u16 name_len, name, u64 payload_len
    (nlen,) = struct.unpack_from("<H", raw, 16)
    at = 18 + nlen
    bad = raw.copy()
    bad[at:at + 8] = struct.pack("<Q", 10 ** 12)
    (tmp_path / "len.ckpt").write_bytes(bytes(bad))
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "len.ckpt")

    (tmp_path / "short.ckpt").write_bytes(bytes(raw[:-5]))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "short.ckpt")


def test_checkpoint_model_mismatch(tmp_path, dataset):
    res = train(TINY, TrainConfig(), dataset, 0)
    del res.checkpoint.params["cls_fc.bias"]
    with pytest.raises(CheckpointError, match="cls_fc.bias"):
        res.checkpoint.build_model()
