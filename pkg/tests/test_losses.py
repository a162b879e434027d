import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import vertlabel.autograd as ag
from vertlabel.autograd import Tensor
from vertlabel.losses import (CropTarget, LossConfig, classification_loss, heatmap_mse_loss,
                              localization_loss, smooth_l1, smooth_l1_tensor, total_loss)


def _target(u, v=None):
    u = np.asarray(u, dtype=float)
    return CropTarget(u, np.zeros((len(u), 3)) if v is None else v)


def test_cls_all_absent_near_zero():
    cfg = LossConfig()
    loss = classification_loss(Tensor(np.full(4, cfg.eps)), _target([0, 0, 0, 0]), cfg)
    assert loss.item() == pytest.approx(0.0, abs=1e-6)


def test_cls_single_present_half_probability():
    loss = classification_loss(Tensor([0.5]), _target([1]), LossConfig(balance_B=2.0))
    assert loss.item() == pytest.approx(-2 * math.log(0.5), abs=1e-9)
    assert loss.item() == pytest.approx(1.3862943611198906, abs=1e-9)


def test_cls_linear_in_balance_factor():
    p = Tensor([0.3, 0.8, 0.6])
    t = _target([1, 0, 1])
    neg = -math.log(1 - 0.8)
    pos2 = classification_loss(p, t, LossConfig(balance_B=2.0)).item() - neg
    pos4 = classification_loss(p, t, LossConfig(balance_B=4.0)).item() - neg
    assert pos4 == pytest.approx(2 * pos2, rel=1e-12)


def test_cls_clamp_keeps_finite():
    loss = classification_loss(Tensor([0.0, 1.0, 1.0, 0.0]), _target([1, 0, 1, 0]))
    assert math.isfinite(loss.item())


def test_cls_size_mismatch():
    with pytest.raises(ValueError):
        classification_loss(Tensor([0.5, 0.5]), _target([1, 0, 0]))


def test_balance_warning():
    with pytest.warns(UserWarning):
        LossConfig(balance_B=5.0)
    with pytest.raises(ValueError):
        LossConfig(lam=0.0)


@pytest.mark.parametrize("x,expected", [(0.0, 0.0), (1.0, 0.5), (-1.0, 0.5), (2.0, 1.5),
                                        (0.5, 0.125), (-3.0, 2.5)])
def test_smooth_l1_values(x, expected):
    assert smooth_l1(x) == pytest.approx(expected, abs=1e-15)


def test_smooth_l1_continuity_at_one():
    for s in (1.0, -1.0):
        below = smooth_l1(s * (1 - 1e-13))
        above = smooth_l1(s * (1 + 1e-13))
        assert abs(below - above) < 1e-12


def test_smooth_l1_derivative():
    x = Tensor(np.array([-2.0, -0.5, 0.3, 0.99, 1.5]), requires_grad=True)
    ag.sum(smooth_l1_tensor(x)).backward()
    np.testing.assert_array_equal(x.grad, [-1.0, -0.5, 0.3, 0.99, 1.0])


def test_reg_perfect_prediction_is_zero():
    v = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    assert localization_loss(Tensor(v), _target([1, 1], v)).item() == 0.0


def test_reg_single_axis_error():
    v = np.array([[5.0, 5.0, 5.0]])
    pred = Tensor([[6.0, 5.0, 5.0]])
    assert localization_loss(pred, _target([1], v), LossConfig(lam=0.4)).item() == pytest.approx(0.2, abs=1e-12)


def test_reg_all_absent_is_zero():
    pred = Tensor(np.random.default_rng(0).normal(size=(3, 3)) * 50, requires_grad=True)
    loss = localization_loss(pred, _target([0, 0, 0]))
    assert loss.item() == 0.0
    loss.backward()
    assert np.all(pred.grad == 0)


def test_reg_nan_rejected():
    with pytest.raises(ValueError, match="NaN"):
        localization_loss(Tensor([[np.nan, 0.0, 0.0]]), _target([1]))


def test_total_loss():
    assert total_loss(Tensor(0.0), Tensor(0.0)).item() == 0.0
    assert total_loss(Tensor(1.2), Tensor(0.3)).item() == pytest.approx(1.5)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2), st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3))
def test_masking_absent_rows(row, delta):
    rng = np.random.default_rng(1)
    u = np.array([1.0, 1.0, 1.0])
    u[row] = 0.0
    v = rng.uniform(0, 8, size=(3, 3))
    base = rng.uniform(0, 8, size=(3, 3))
    moved = base.copy()
    moved[row] += delta
    a = Tensor(base, requires_grad=True)
    b = Tensor(moved, requires_grad=True)
    la = localization_loss(a, _target(u, v))
    lb = localization_loss(b, _target(u, v))
    assert la.item() == lb.item()
    la.backward()
    lb.backward()
    np.testing.assert_array_equal(a.grad, b.grad)
    assert np.all(b.grad[row] == 0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=4, max_size=4), st.lists(st.booleans(), min_size=4, max_size=4))
def test_losses_nonnegative(p, u):
    t = _target(np.array(u, dtype=float), np.ones((4, 3)))
    assert classification_loss(Tensor(np.array(p)), t).item() >= 0
    pred = Tensor(np.array(p * 3).reshape(4, 3) * 10)
    assert localization_loss(pred, t).item() >= 0


def test_total_gradient_is_sum_of_branch_gradients():
    rng = np.random.default_rng(3)
    w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    x = rng.normal(size=3)
    t = _target([1, 0, 1, 1], rng.uniform(0, 3, size=(4, 3)))

    def branches():
        h = ag.linear(Tensor(x), w)
        probs = ag.sigmoid(h)
        coords = ag.reshape(ag.concat([h, h, h]), (3, 4))
        coords = ag.transpose(coords)
        return classification_loss(probs, t), localization_loss(coords, t)

    grads = []
    for pick in (0, 1):
        w.zero_grad()
        branches()[pick].backward()
        grads.append(w.grad.copy())
    errs = ag.check_gradients(lambda: total_loss(*branches()), [w])
    assert max(errs.values()) < 1e-6
    w.zero_grad()
    total_loss(*branches()).backward()
    np.testing.assert_allclose(w.grad, grads[0] + grads[1], atol=1e-12)


def test_heatmap_mse_only_on_present_channels():
    t = _target([1, 0], np.array([[1.0, 1.0, 1.0], [0.0, 0.0, 0.0]]))
    h = np.zeros((2, 3, 3, 3))
    h[1] = 5.0
    loss_a = heatmap_mse_loss(Tensor(h), t).item()
    h[1] = -7.0
    assert heatmap_mse_loss(Tensor(h), t).item() == loss_a
