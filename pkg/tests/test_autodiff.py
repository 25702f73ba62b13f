import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sliderlab import autodiff as ad
from _fd import FD_TOL, directional_check, op_cases

N_CASES = 50


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    worst = {}
    for _ in range(N_CASES):
        for name, fn, arrays in op_cases(rng):
            worst[name] = max(worst.get(name, 0.0), directional_check(fn, arrays, rng))
    bad = {k: v for k, v in worst.items() if v >= FD_TOL}
    assert not bad, bad


def test_chain_rule_small_example():
    x = ad.Tensor(3.0, requires_grad=True)
    y = x * x
    z = y * y
    ad.backward(z)
    assert x.grad == pytest.approx(4 * 27.0)


def test_shared_input_accumulates():
    x = ad.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    loss = ad.reduce_sum(x * x + x)
    ad.backward(loss)
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_softmax_rows_sum_to_one():
    a = ad.softmax(ad.Tensor(np.random.default_rng(1).normal(0, 30, (4, 7))))
    np.testing.assert_allclose(a.data.sum(-1), 1.0)


def test_layernorm_constant_row_is_finite():
    out = ad.layernorm(ad.Tensor(np.full((2, 5), 3.0)))
    assert np.all(out.data == 0.0)


def test_backward_requires_scalar():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ad.ShapeError):
        ad.backward(x * 2.0)


def test_graph_is_single_use():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    loss = ad.reduce_sum(x * x)
    ad.backward(loss)
    with pytest.raises(ad.GraphError):
        ad.backward(loss)


def test_shape_errors():
    a = ad.Tensor(np.ones((2, 3)))
    with pytest.raises(ad.ShapeError):
        ad.matmul(a, ad.Tensor(np.ones((2, 3))))
    with pytest.raises(ad.ShapeError):
        ad.add(a, ad.Tensor(np.ones((4,))))
    with pytest.raises(ad.ShapeError):
        ad.embed_lookup(ad.Tensor(np.ones((3, 2))), [3])
    with pytest.raises(IndexError):
        ad.scatter_rows(a, ad.Tensor(np.ones((2, 3))), [0, 0])


def test_non_finite_is_reported():
    with np.errstate(over="ignore"), pytest.raises(ad.NonFiniteError):
        ad.mul(ad.Tensor(np.array([1e200])), ad.Tensor(np.array([1e200])))


def test_no_grad_builds_no_graph():
    x = ad.Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        y = x * x
    assert not y.requires_grad and y._parents == ()


def test_forward_op_dispatch():
    x = ad.Tensor(np.arange(6.0).reshape(2, 3))
    np.testing.assert_array_equal(ad.forward_op("softmax", [x], axis=-1).data, ad.softmax(x).data)
    with pytest.raises(ValueError):
        ad.forward_op("conv", [x])


def test_leaf_grads_returned_by_id():
    w = ad.Tensor(np.ones((2, 2)), requires_grad=True)
    got = ad.backward(ad.reduce_sum(w @ ad.Tensor(np.ones((2, 2)))))
    np.testing.assert_array_equal(got[w.id], w.grad)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8))
def test_softmax_is_shift_invariant(xs):
    x = np.array(xs)
    a = ad.softmax(ad.Tensor(x)).data
    b = ad.softmax(ad.Tensor(x + 7.5)).data
    np.testing.assert_allclose(a, b, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4))
def test_reshape_transpose_roundtrip(a, b, c):
    x = np.random.default_rng(a * 100 + b * 10 + c).standard_normal((a, b, c))
    t = ad.transpose(ad.reshape(ad.Tensor(x), (a, b * c)), (1, 0))
    back = ad.reshape(ad.transpose(t, (1, 0)), (a, b, c))
    np.testing.assert_array_equal(back.data, x)
