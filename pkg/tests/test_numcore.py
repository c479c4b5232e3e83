import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from eegattn import numcore as nc
from eegattn.numcore import Tensor


def leaf(x):
    return Tensor(x, requires_grad=True)


def test_softmax_equal_logits_uniform():
    np.testing.assert_allclose(nc.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_relu_definition():
    np.testing.assert_array_equal(nc.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])


def test_conv_delta_kernel_is_identity():
    rng = np.random.default_rng(0)
    img = rng.normal(size=(2, 7, 5, 1))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    out = nc.conv2d(Tensor(img), Tensor(k)).data
    np.testing.assert_array_equal(out, img.astype(np.float32))


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 5, 6, 2))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((1, 5, 6, 3))
    for o in range(3):
        for i in range(5):
            for j in range(6):
                ref[0, i, j, o] = np.sum(xp[0, i:i + 3, j:j + 3, :] * w[o].transpose(1, 2, 0)) + b[o]
    out = nc.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(out, ref, rtol=1e-5, atol=1e-5)


def test_shape_errors_name_op_and_shapes():
    with pytest.raises(nc.ShapeError, match=r"matmul.*\(2, 3\).*\(4, 2\)"):
        nc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(nc.ShapeError, match="add"):
        nc.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(nc.ShapeError, match="conv2d"):
        nc.conv2d(Tensor(np.ones((1, 4, 4, 2))), Tensor(np.ones((3, 1, 3, 3))))


def test_backward_square():
    x = leaf(3.0)
    nc.backward(x * x)
    assert x.grad == pytest.approx(6.0)


def test_backward_sum_of_softmax_is_zero():
    z = leaf(np.random.default_rng(2).normal(size=5))
    nc.backward(nc.sum(nc.softmax(z)))
    np.testing.assert_allclose(z.grad, 0.0, atol=1e-6)


def test_backward_rejects_non_scalar():
    x = leaf(np.ones(3))
    with pytest.raises(nc.ShapeError):
        nc.backward(x * 2.0)


def test_gradients_accumulate_until_cleared():
    x = leaf(2.0)
    nc.backward(x * x)
    nc.backward(x * x)
    assert x.grad == pytest.approx(8.0)
    x.zero_grad()
    nc.backward(x * x)
    assert x.grad == pytest.approx(4.0)


def test_every_leaf_gets_gradient():
    a, b = leaf(np.ones(3)), leaf(np.ones(3))
    nc.backward(nc.sum(nc.relu(a * -1.0) + b))
    np.testing.assert_array_equal(a.grad, 0.0)
    np.testing.assert_array_equal(b.grad, 1.0)


def test_maxpool_ties_go_to_first_element():
    x = leaf(np.ones((1, 2, 2, 1)))
    nc.backward(nc.sum(nc.maxpool2x2(x)))
    np.testing.assert_array_equal(x.grad[0, :, :, 0], [[1, 0], [0, 0]])


def test_grad_check_sum_of_squares():
    with nc.precision(np.float64):
        p = leaf(np.random.default_rng(3).normal(size=(4, 3)))
        err = nc.grad_check(lambda: nc.sum(p * p), [p])
    assert err < 1e-4


def test_grad_check_constant_is_zero():
    with nc.precision(np.float64):
        p = leaf(np.ones(4))
        err = nc.grad_check(lambda: Tensor(1.5), [p])
    assert err == 0.0


def test_grad_check_rejects_bad_eps():
    p = leaf(np.ones(2))
    with pytest.raises(ValueError):
        nc.grad_check(lambda: nc.sum(p), [p], eps=0.0)


def test_grad_check_rejects_non_finite():
    p = leaf(np.ones(2))
    with pytest.raises(FloatingPointError):
        nc.grad_check(lambda: nc.sum(p) * np.inf, [p])


OPS = {
    "add": lambda a, b: nc.add(a, b),
    "sub": lambda a, b: nc.sub(a, b),
    "mul": lambda a, b: nc.mul(a, b),
    "matmul": lambda a, b: nc.matmul(a, b),
    "tanh": lambda a, b: nc.tanh(a) * b,
    "sigmoid": lambda a, b: nc.sigmoid(a) * b,
    "relu": lambda a, b: nc.relu(a) * b,
    "softmax0": lambda a, b: nc.softmax(a, axis=0) * b,
    "softmax1": lambda a, b: nc.softmax(a, axis=1) * b,
    "log": lambda a, b: nc.log(nc.sigmoid(a)) * b,
    "mean": lambda a, b: nc.mean(a * b, axis=0),
    "concat": lambda a, b: nc.concat([a, b], axis=1),
    "index_select": lambda a, b: nc.index_select(a, [2, 0, 2], axis=0) * nc.index_select(b, [1, 1, 0], axis=0),
    "transpose": lambda a, b: nc.transpose(a, (1, 0)) * nc.transpose(b, (1, 0)),
}


@pytest.mark.parametrize("name", sorted(OPS))
@pytest.mark.parametrize("seed", range(3))
def test_op_gradients_match_finite_differences(name, seed):
    rng = np.random.default_rng(seed)
    with nc.precision(np.float64):
        a = leaf(rng.normal(size=(4, 4)))
        b = leaf(rng.normal(size=(4, 4)))

        def f():
            out = OPS[name](a, b)
            return nc.sum(out * 0.5 + out * out * 0.1)

        assert nc.grad_check(f, [a, b], eps=1e-6) < 1e-3


@pytest.mark.parametrize("seed", range(3))
def test_conv_and_pool_gradients(seed):
    rng = np.random.default_rng(seed)
    with nc.precision(np.float64):
        x = leaf(rng.normal(size=(2, 4, 4, 3)))
        w = leaf(rng.normal(size=(4, 3, 3, 3)))
        b = leaf(rng.normal(size=4))
        assert nc.grad_check(lambda: nc.sum(nc.tanh(nc.maxpool2x2(nc.conv2d(x, w, b)))), [x, w, b], eps=1e-6) < 1e-3


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)),
              elements=st.floats(-1e4, 1e4, allow_nan=False)))
def test_softmax_is_a_distribution(z):
    y = nc.softmax(Tensor(z), axis=1).data
    assert (y >= 0).all()
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-6)


def _network_grads():
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(size=(3, 8, 8, 2)))
    w1 = leaf(rng.normal(size=(4, 2, 3, 3)))
    w2 = leaf(rng.normal(size=(4, 3)))
    h = nc.maxpool2x2(nc.relu(nc.conv2d(x, w1)))
    out = nc.softmax(nc.matmul(nc.mean(nc.reshape(h, (3, 16, 4)), axis=1), w2), axis=1)
    nc.backward(nc.sum(nc.log(out) * -1.0))
    return w1.grad, w2.grad


def test_backward_is_deterministic():
    g1, g2 = _network_grads(), _network_grads()
    for a, b in zip(g1, g2):
        assert a.tobytes() == b.tobytes()


def test_backward_visits_in_reverse_execution_order():
    seen = []
    x = leaf(1.0)
    y = x * 2.0
    z = y + 1.0
    for t in (y, z):
        fn = t.backward_fn

        def wrapped(g, fn=fn, t=t):
            seen.append(t.op)
            fn(g)

        t.backward_fn = wrapped
    nc.backward(z)
    assert seen == ["add", "mul"]


def test_float32_network_matches_finite_differences_at_coarse_eps():
    """Whole small network in float64 at eps=1e-3 and rel tol 1e-3."""
    rng = np.random.default_rng(11)
    with nc.precision(np.float64):
        x = Tensor(rng.normal(size=(2, 8, 8, 2)))
        w1 = leaf(rng.normal(size=(3, 2, 3, 3)) * 0.5)
        w2 = leaf(rng.normal(size=(3, 2)) * 0.5)

        def f():
            h = nc.tanh(nc.conv2d(x, w1))
            v = nc.mean(nc.reshape(h, (2, 64, 3)), axis=1)
            p = nc.softmax(nc.matmul(v, w2), axis=1)
            return nc.sum(nc.log(p) * Tensor([[1.0, 0.0], [0.0, 1.0]])) * -1.0

        assert nc.grad_check(f, [w1, w2], eps=1e-3) < 1e-3


def test_no_grad_does_not_record():
    x = leaf(2.0)
    with nc.no_grad():
        y = x * x
    assert not y.requires_grad and y.parents == ()


def test_adam_and_sgd_reduce_quadratic():
    for cls, lr in ((nc.SGD, 0.1), (nc.Adam, 0.1)):
        p = leaf(np.array([3.0, -2.0]))
        opt = cls([p], lr)
        for _ in range(200):
            opt.zero_grad()
            nc.backward(nc.sum(p * p))
            opt.step()
        assert np.abs(p.data).max() < 0.05
