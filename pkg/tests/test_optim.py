import numpy as np
import pytest

from bikd.networks import MlpSpec, init_params, zero_params
from bikd.optim import Adam, PlainSgd, SgdMomentum, make_meta_optimizer, step_lr


def _model():
    return init_params(MlpSpec((3, 2)), 0)


def _grads(m, value):
    return {k: np.full(v.shape, value) for k, v in m.params.items()}


def test_step_schedule():
    assert step_lr(0.1, 79, (80, 100)) == 0.1
    assert step_lr(0.1, 80, (80, 100)) == pytest.approx(0.01, rel=1e-15)
    assert step_lr(0.1, 100, (80, 100)) == pytest.approx(0.001, rel=1e-15)


def test_plain_sgd_exact():
    m = _model()
    before = m.flat().copy()
    PlainSgd(0.5).step(m, _grads(m, 2.0))
    assert np.array_equal(m.flat(), before - 0.5 * 2.0)


def test_sgd_momentum_weight_decay_only():
    m = _model()
    before = m.flat().copy()
    SgdMomentum(0.1, momentum=0.0, weight_decay=5e-4).step(m, _grads(m, 0.0))
    np.testing.assert_array_equal(m.flat(), before - 0.1 * (5e-4 * before))


def test_sgd_momentum_buffer_sequence():
    m = zero_params(MlpSpec((2, 1)))
    opt = SgdMomentum(1.0, momentum=0.9, weight_decay=0.0)
    opt.step(m, _grads(m, 1.0))
    assert np.all(m.flat() == -1.0)
    opt.step(m, _grads(m, 1.0))
    np.testing.assert_allclose(m.flat(), -1.0 - 1.9, rtol=1e-15)
    assert np.all(m.slots["momentum"]["fc0.weight"] == 1.9)


def test_adam_first_step_unit_gradient():
    m = zero_params(MlpSpec((3, 2)))
    Adam(1e-3).step(m, _grads(m, 1.0))
    np.testing.assert_allclose(np.abs(m.flat()), 1e-3 / (1 + 1e-8), rtol=1e-12)


def test_adam_zero_gradient_leaves_params_unchanged():
    m = _model()
    before = m.flat().copy()
    Adam(1e-3).step(m, _grads(m, 0.0))
    assert np.array_equal(m.flat(), before)


def test_gradient_shape_checked():
    m = _model()
    g = _grads(m, 1.0)
    g["fc0.weight"] = np.ones((2, 3))
    with pytest.raises(ValueError):
        PlainSgd().step(m, g)


def test_meta_optimizer_factory():
    assert isinstance(make_meta_optimizer("adam", 1e-3), Adam)
    assert isinstance(make_meta_optimizer("sgd", 1e-3), PlainSgd)
    with pytest.raises(ValueError):
        make_meta_optimizer("rmsprop", 1e-3)
