import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bikd import autodiff as ad
from bikd.autodiff import ShapeError, Tensor

from oracles import central_diff, log_softmax_ref, max_rel_err


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------- forward values


def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(2)), Tensor(a)).data, a)


def test_matmul_hand():
    assert ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_sigmoid_tanh_at_zero():
    assert ad.sigmoid(Tensor([0.0])).data[0] == 0.5
    assert ad.tanh(Tensor([0.0])).data[0] == 0.0


def test_sigmoid_extremes_are_finite():
    out = ad.sigmoid(Tensor([-800.0, 800.0])).data
    assert np.all(np.isfinite(out)) and out[0] == 0.0 and out[1] == 1.0


def test_elementwise_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.elementwise("add", Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_elementwise_unknown_op():
    with pytest.raises(ValueError):
        ad.elementwise("pow", Tensor(np.ones(3)))


def test_log_softmax_uniform():
    np.testing.assert_allclose(ad.log_softmax(Tensor([[0.0, 0.0]])).data, np.log([[0.5, 0.5]]), rtol=0, atol=1e-15)


@pytest.mark.parametrize("a", [-3.0, 0.0, 7.5])
@pytest.mark.parametrize("tau", [0.5, 1.0, 4.0])
def test_log_softmax_constant_row(a, tau):
    np.testing.assert_allclose(ad.log_softmax(Tensor([[a, a, a]]), tau).data, np.log(1 / 3), atol=1e-15)


def test_log_softmax_temperature_scaling():
    np.testing.assert_allclose(
        ad.log_softmax(Tensor([[4.0, 0.0]]), 4.0).data, ad.log_softmax(Tensor([[1.0, 0.0]]), 1.0).data, atol=1e-15
    )


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_log_softmax_rejects_bad_temperature(tau):
    with pytest.raises(ValueError):
        ad.log_softmax(Tensor([[1.0, 2.0]]), tau)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-1e4, 1e4)), st.floats(0.1, 10.0))
def test_log_softmax_rows_normalized(z, tau):
    out = ad.log_softmax(Tensor(z), tau).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(np.exp(out).sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(out, log_softmax_ref(z, tau), atol=1e-9)


def test_sum_all_is_sequential():
    x = np.array([1e16, 1.0, -1e16, 1.0])
    # left-to-right: ((1e16 + 1) - 1e16) + 1 = 1.0 in double precision
    assert ad.sum_all(Tensor(x)).item() == ((x[0] + x[1]) + x[2]) + x[3]


def test_conv2d_matches_loop_reference():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 5, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 5, 5))
    for n in range(2):
        for o in range(4):
            for i in range(5):
                for j in range(5):
                    ref[n, o, i, j] = np.sum(xp[n, :, i : i + 3, j : j + 3] * w[o]) + b[o]
    np.testing.assert_allclose(ad.conv2d(Tensor(x), Tensor(w), Tensor(b), padding=1).data, ref, atol=1e-12)


def test_maxpool_values():
    x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    assert ad.maxpool2x2(Tensor(x)).data[0, 0].tolist() == [[5.0, 7.0], [13.0, 15.0]]


def test_slice_view_and_reshape():
    flat = Tensor(np.arange(10.0))
    np.testing.assert_array_equal(ad.slice_view(flat, 2, (2, 3)).data, np.arange(2.0, 8.0).reshape(2, 3))
    with pytest.raises(ShapeError):
        ad.slice_view(flat, 8, (2, 2))


# ---------------------------------------------------------------- gradients


def test_square_gradient():
    x = leaf([3.0])
    ad.backward(ad.sum_all(ad.mul(x, x)))
    assert x.grad.tolist() == [6.0]


def test_sigmoid_sum_gradient():
    x = leaf(np.zeros(4))
    ad.backward(ad.sum_all(ad.sigmoid(x)))
    assert x.grad.tolist() == [0.25] * 4


def test_backward_accumulates_and_zero_grad_clears():
    x = leaf([2.0])
    ad.backward(ad.sum_all(ad.scale(x, 3.0)))
    ad.backward(ad.sum_all(ad.scale(x, 3.0)))
    assert x.grad.tolist() == [6.0]
    ad.zero_grad([x])
    assert x.grad is None


def test_backward_requires_scalar():
    x = leaf(np.ones(3))
    with pytest.raises(ValueError):
        ad.backward(ad.scale(x, 2.0))


def test_backward_requires_live_tape():
    with pytest.raises(ValueError):
        ad.backward(Tensor([1.0]))


def test_no_grad_records_nothing():
    x = leaf([1.0, 2.0])
    with ad.no_grad():
        y = ad.tanh(x)
    assert not y.requires_grad and y.is_leaf


def test_no_grad_is_thread_local():
    seen = []

    def worker():
        seen.append(ad.is_recording())

    with ad.no_grad():
        t = threading.Thread(target=worker)
        t.start()
        t.join()
    assert seen == [True]


def test_detach_blocks_gradient():
    x = leaf([0.3, -1.2])
    g = ad.tanh(ad.scale(x, 2.0))
    y = ad.sum_all(ad.mul(g.detach(), g.detach()))
    (gx,) = ad.grad(y, [x])
    assert np.all(gx == 0.0)


def test_grad_is_functional():
    x = leaf([1.0, 2.0])
    (g,) = ad.grad(ad.sum_all(ad.mul(x, x)), [x])
    assert g.tolist() == [2.0, 4.0] and x.grad is None


def test_grad_of_unreached_input_is_zero():
    x, z = leaf([1.0]), leaf([5.0])
    gx, gz = ad.grad(ad.sum_all(ad.exp(x)), [x, z])
    assert gz.tolist() == [0.0]


def test_shared_subexpression_accumulates():
    x = leaf([1.5])
    y = ad.tanh(x)
    (g,) = ad.grad(ad.sum_all(ad.add(y, y)), [x])
    np.testing.assert_allclose(g, 2 * (1 - np.tanh(1.5) ** 2), rtol=1e-15)


def _fd_check(build, inputs, seed):
    """Projected-output gradcheck against the test-side central-difference oracle."""
    rng = np.random.default_rng(seed)
    leaves = [leaf(x) for x in inputs]
    proj = rng.normal(size=build(leaves).shape)

    def scalar(ts):
        return ad.sum_all(ad.mul(build(ts), Tensor(proj)))

    grads = ad.grad(scalar(leaves), leaves)
    worst = 0.0
    for i, (x, g) in enumerate(zip(inputs, grads)):
        def f(xi, i=i):
            args = [Tensor(v) for v in inputs]
            args[i] = Tensor(xi)
            return scalar(args).item()

        worst = max(worst, max_rel_err(g, central_diff(f, x)))
    return worst


def _cases(rng):
    n = rng.normal
    return {
        "matmul": (lambda t: ad.matmul(t[0], t[1]), [n(size=(3, 4)), n(size=(4, 2))]),
        "mul": (lambda t: ad.mul(t[0], t[1]), [n(size=(2, 3)), n(size=(2, 3))]),
        "sub": (lambda t: ad.sub(t[0], t[1]), [n(size=(2, 3)), n(size=(2, 3))]),
        "relu": (lambda t: ad.relu(t[0]), [n(size=(4, 3))]),
        "tanh": (lambda t: ad.tanh(t[0]), [n(size=(4, 3))]),
        "sigmoid": (lambda t: ad.sigmoid(t[0]), [n(size=(4, 3))]),
        "exp": (lambda t: ad.exp(t[0]), [n(size=(4, 3))]),
        "add_bias": (lambda t: ad.add_bias(t[0], t[1]), [n(size=(4, 3)), n(size=3)]),
        "log_softmax": (lambda t: ad.log_softmax(t[0], 2.5), [n(size=(3, 5)) * 3]),
        "row_sum": (lambda t: ad.row_sum(t[0]), [n(size=(3, 5))]),
        "column": (lambda t: ad.column(t[0], 2), [n(size=(3, 5))]),
        "conv2d": (lambda t: ad.conv2d(t[0], t[1], t[2], padding=1), [n(size=(1, 2, 4, 4)), n(size=(2, 2, 3, 3)), n(size=2)]),
        "maxpool": (lambda t: ad.maxpool2x2(t[0]), [n(size=(1, 2, 4, 4))]),
        "slice_view": (lambda t: ad.slice_view(t[0], 1, (2, 2)), [n(size=6)]),
    }


@pytest.mark.parametrize("name", sorted(_cases(np.random.default_rng(0))))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_primitive_gradcheck(name, seed):
    build, inputs = _cases(np.random.default_rng(seed))[name]
    assert _fd_check(build, inputs, seed) < 1e-5


@pytest.mark.parametrize("seed", range(3))
def test_jvp_matches_directional_difference(seed):
    rng = np.random.default_rng(seed)
    W, x, v = rng.normal(size=(4, 3)), rng.normal(size=(2, 4)), rng.normal(size=(4, 3))

    def f(Wv):
        return ad.log_softmax(ad.tanh(ad.matmul(Tensor(x), Wv)), 2.0)

    Wl = leaf(W)
    (t,) = ad.jvp([f(Wl)], [(Wl, v)])
    h = 1e-6
    fd = (f(Tensor(W + h * v)).data - f(Tensor(W - h * v)).data) / (2 * h)
    assert max_rel_err(t, fd) < 1e-7


def test_determinism_bitwise():
    rng = np.random.default_rng(3)
    W, x = rng.normal(size=(5, 4)), rng.normal(size=(6, 5))

    def run():
        Wl = leaf(W)
        loss = ad.mean(ad.row_sum(ad.log_softmax(ad.relu(ad.matmul(Tensor(x), Wl)), 3.0)))
        (g,) = ad.grad(loss, [Wl])
        return loss.item(), g

    (l1, g1), (l2, g2) = run(), run()
    assert l1 == l2 and np.array_equal(g1, g2)
