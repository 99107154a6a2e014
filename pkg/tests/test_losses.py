import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bikd import autodiff as ad
from bikd.autodiff import ShapeError, Tensor
from bikd.losses import (
    KdConfig,
    constant_weights,
    fixed_alpha_kd_loss,
    hard_loss,
    one_hot,
    soft_ce_loss,
    soft_loss,
    val_loss,
    weighted_train_loss,
)

from oracles import log_softmax_ref

logit_arrays = arrays(np.float64, (4, 5), elements=st.floats(-1e4, 1e4))


def test_hard_loss_uniform():
    assert hard_loss(Tensor([[0.0, 0.0]]), one_hot([0], 2)).item() == pytest.approx(np.log(2), abs=1e-15)


def test_hard_loss_confident_correct():
    v = hard_loss(Tensor([[1e3, -1e3]]), one_hot([0], 2)).item()
    assert np.isfinite(v) and v == pytest.approx(0.0, abs=1e-300)


def test_hard_loss_hand_value():
    expected = -(3 - np.log(np.exp(1) + np.exp(2) + np.exp(3)))
    v = hard_loss(Tensor([[1.0, 2.0, 3.0]]), one_hot([2], 3)).item()
    assert v == pytest.approx(expected, rel=1e-14)
    assert round(v, 5) == 0.40761


def test_hard_loss_rejects_non_one_hot():
    with pytest.raises(ValueError):
        hard_loss(Tensor([[0.0, 1.0]]), np.array([[0.5, 0.5]]))


def test_soft_loss_identical_logits_is_zero():
    z = np.random.default_rng(0).normal(size=(3, 4))
    for tau in (1.0, 4.0):
        assert np.all(np.abs(soft_loss(z, Tensor(z), tau).data) < 1e-15)


def test_soft_loss_hand_value():
    t = np.log([[0.8, 0.2]])
    s = np.log([[0.5, 0.5]])
    v = soft_loss(t, Tensor(s), 1.0).item()
    assert v == pytest.approx(0.8 * np.log(1.6) + 0.2 * np.log(0.4), rel=1e-13)
    assert round(v, 5) == 0.19274


def test_soft_loss_tau_squared_scaling():
    rng = np.random.default_rng(1)
    t, s = rng.normal(size=(3, 5)) * 4, rng.normal(size=(3, 5)) * 4
    a = soft_loss(t, Tensor(s), 4.0).data
    b = soft_loss(t / 4, Tensor(s / 4), 1.0).data
    np.testing.assert_allclose(a, 16.0 * b, rtol=1e-12)


def test_soft_loss_shape_error():
    with pytest.raises(ShapeError):
        soft_loss(np.zeros((2, 3)), Tensor(np.zeros((2, 4))), 1.0)


def test_soft_loss_no_gradient_to_teacher():
    t = Tensor(np.random.default_rng(2).normal(size=(2, 3)), requires_grad=True)
    s = Tensor(np.zeros((2, 3)), requires_grad=True)
    gt, gs = ad.grad(ad.sum_all(soft_loss(t, s, 2.0)), [t, s])
    assert np.all(gt == 0) and np.any(gs != 0)


@settings(max_examples=80, deadline=None)
@given(logit_arrays, logit_arrays, st.floats(0.5, 8.0))
def test_soft_loss_nonnegative_and_finite(t, s, tau):
    v = soft_loss(t, Tensor(s), tau).data
    assert np.all(np.isfinite(v)) and np.all(v >= -1e-12 * max(1.0, tau * tau))


@settings(max_examples=60, deadline=None)
@given(logit_arrays, st.integers(0, 4))
def test_hard_loss_finite_for_large_logits(z, label):
    assert np.all(np.isfinite(hard_loss(Tensor(z), one_hot([label] * 4, 5)).data))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-20, 20)), arrays(np.float64, (3, 4), elements=st.floats(-20, 20)))
def test_kl_and_soft_ce_differ_by_teacher_entropy(t, s):
    tau = 4.0
    lp = log_softmax_ref(t, tau)
    ent = -np.sum(np.exp(lp) * lp, axis=1) * tau * tau
    kl = soft_loss(t, Tensor(s), tau).data
    ce = soft_ce_loss(t, Tensor(s), tau).data
    np.testing.assert_allclose(ce - kl, ent, atol=1e-9 * (1 + np.abs(ce).max()))


def test_weighted_loss_cases():
    rng = np.random.default_rng(3)
    lh, ls = Tensor(rng.random(6) * 3), Tensor(rng.random(6) * 2)
    zero = Tensor(np.zeros(6))
    one = Tensor(np.ones(6))
    half = Tensor(np.full(6, 0.5))
    assert weighted_train_loss(zero, zero, lh, ls).item() == 0.0
    assert weighted_train_loss(one, zero, lh, ls).item() == pytest.approx(lh.data.mean(), rel=1e-15)
    assert weighted_train_loss(half, half, lh, ls).item() == pytest.approx(0.5 * (lh.data.mean() + ls.data.mean()), rel=1e-14)
    with pytest.raises(ShapeError):
        weighted_train_loss(Tensor(np.ones(5)), half, lh, ls)


def test_weighted_loss_differentiable_in_weights():
    lh, ls = Tensor([1.0, 2.0]), Tensor([3.0, 5.0])
    wh, ws = Tensor([0.2, 0.4], requires_grad=True), Tensor([0.6, 0.8], requires_grad=True)
    gh, gs = ad.grad(weighted_train_loss(wh, ws, lh, ls), [wh, ws])
    np.testing.assert_allclose(gh, [0.5, 1.0])
    np.testing.assert_allclose(gs, [1.5, 2.5])


@pytest.mark.parametrize("alpha", [0.0, 0.5, 1.0])
def test_fixed_alpha_endpoints(alpha):
    rng = np.random.default_rng(4)
    t, s = rng.normal(size=(5, 3)), Tensor(rng.normal(size=(5, 3)))
    y = one_hot(rng.integers(0, 3, 5), 3)
    mh = hard_loss(s, y).data.mean()
    ms = soft_loss(t, s, 4.0).data.mean()
    v = fixed_alpha_kd_loss(t, s, y, KdConfig(tau=4.0, alpha=alpha)).item()
    assert v == pytest.approx((1 - alpha) * mh + alpha * ms, rel=1e-14)


def test_fixed_alpha_range():
    with pytest.raises(ValueError):
        constant_weights(3, 1.5)


def test_val_loss_cases():
    assert val_loss(Tensor(np.zeros((4, 10))), one_hot([0, 3, 5, 9], 10)).item() == pytest.approx(np.log(10), rel=1e-15)
    assert val_loss(Tensor([[50.0, -50.0]]), one_hot([0], 2)).item() < 1e-40
    z = Tensor(np.random.default_rng(5).normal(size=(6, 4)))
    y = one_hot([0, 1, 2, 3, 0, 1], 4)
    assert val_loss(z, y).item() == pytest.approx(hard_loss(z, y).data.mean(), rel=1e-15)
