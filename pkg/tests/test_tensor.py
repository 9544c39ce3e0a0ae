import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from eegground import tensor as T
from eegground.acceptance import gradient_cases
from eegground.gradcheck import grad_check, numeric_gradient
from eegground.tensor import ShapeError, Tensor

CASES = gradient_cases(np.random.default_rng(7))


@pytest.mark.parametrize("name", sorted(CASES))
def test_primitive_gradients(name):
    fn, sample = CASES[name]
    for _ in range(3):
        assert grad_check(fn, sample()) < 1e-4


def test_stop_gradient_blocks_flow():
    x = Tensor(np.arange(3.0), requires_grad=True)
    (g,) = T.gradients(T.sum_(T.stop_gradient(x) * x), [x])
    np.testing.assert_array_equal(g, np.arange(3.0))


def test_unbroadcast_over_leading_and_unit_axes():
    b = Tensor(np.ones((1, 4)), requires_grad=True)
    x = Tensor(np.ones((2, 3, 4)))
    (g,) = T.gradients(T.sum_(x * b), [b])
    np.testing.assert_array_equal(g, np.full((1, 4), 6.0))


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = T.exp(x)
    assert not y.requires_grad
    assert T.grad_enabled()


def test_gradient_accumulates_across_uses():
    x = Tensor(np.array([2.0]), requires_grad=True)
    (g,) = T.gradients(T.sum_(x * x + x), [x])
    assert g[0] == pytest.approx(5.0)


def test_grad_check_flags_wrong_gradient():
    def bad(x):
        # forward is x^2 but the stop-gradient hides half the derivative
        return T.sum_(x * T.stop_gradient(x))

    assert grad_check(bad, np.array([1.0, 2.0])) > 0.1


def test_grad_check_rejects_bad_eps():
    with pytest.raises(ValueError):
        grad_check(lambda x: T.sum_(x), np.ones(2), eps=0)


def test_numeric_gradient_of_quadratic():
    g = numeric_gradient(lambda x: T.sum_(x * x), np.array([1.0, -3.0]), 1e-6)
    np.testing.assert_allclose(g, [2.0, -6.0], atol=1e-8)


finite = arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)),
                elements=st.floats(-30, 30, allow_nan=False))


@given(finite)
def test_softmax_rows_sum_to_one(x):
    p = T.softmax(Tensor(x)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)


@given(finite)
def test_log_softmax_matches_log_of_softmax(x):
    np.testing.assert_allclose(T.log_softmax(Tensor(x)).data, np.log(T.softmax(Tensor(x)).data), atol=1e-9)


@given(finite.filter(lambda a: np.all(np.linalg.norm(a, axis=1) > 1e-3)))
def test_l2_normalize_unit_rows(x):
    np.testing.assert_allclose(np.linalg.norm(T.l2_normalize(Tensor(x)).data, axis=1), 1.0, atol=1e-12)


@given(finite)
def test_layer_norm_zero_mean(x):
    d = x.shape[1]
    y = T.layer_norm(Tensor(x), Tensor(np.ones(d)), Tensor(np.zeros(d))).data
    np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-9)


def test_cross_entropy_uniform_logits():
    assert T.cross_entropy(Tensor(np.zeros((3, 5))), [0, 1, 4]).item() == pytest.approx(np.log(5))
