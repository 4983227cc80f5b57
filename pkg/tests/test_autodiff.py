import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sigmanet.autodiff import FlopCounter, ShapeError, Tensor, functional as F, grad_check, no_grad
from sigmanet.autodiff.gradcheck import numeric_grad, relative_error
from sigmanet.autodiff.tensor import get_default_dtype, set_default_dtype

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def T(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


# --------------------------------------------------------------------------- tensor basics
def test_default_dtype_is_float32_and_switchable():
    assert get_default_dtype() == np.float32
    assert Tensor([1, 2]).dtype == np.float32
    set_default_dtype("float64")
    assert Tensor([1, 2]).dtype == np.float64


def test_set_default_dtype_rejects_ints():
    with pytest.raises(ValueError):
        set_default_dtype("int32")


def test_grad_has_data_shape():
    x = T(np.ones((2, 3)), grad=True)
    (x * 2.0).sum().backward()
    assert x.grad.shape == x.shape


def test_backward_of_sum_is_ones():
    x = T(np.arange(6.0).reshape(2, 3), grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_of_half_square_is_identity():
    x = T(np.random.default_rng(0).standard_normal(5), grad=True)
    ((x * x).sum() / 2.0).backward()
    np.testing.assert_allclose(x.grad, x.data, rtol=0, atol=1e-15)


def test_backward_rejects_non_scalar():
    x = T(np.ones(3), grad=True)
    with pytest.raises(ValueError, match="scalar"):
        (x * 2.0).backward()


def test_repeated_backward_accumulates():
    x = T(np.ones(3), grad=True)
    (x * 3.0).sum().backward()
    (x * 3.0).sum().backward()
    np.testing.assert_array_equal(x.grad, np.full(3, 6.0))
    x.zero_grad()
    assert x.grad is None


def test_no_grad_records_nothing():
    x = T(np.ones(3), grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_no_grad_is_thread_local():
    seen = {}

    def worker():
        x = T(np.ones(2), grad=True)
        seen["grad"] = (x * 2.0).requires_grad

    with no_grad():
        t = threading.Thread(target=worker)
        t.start()
        t.join()
    assert seen["grad"] is True


def test_broadcast_gradients_are_unbroadcast():
    a = T(np.ones((3, 4)), grad=True)
    b = T(np.arange(4.0), grad=True)
    (a * b).sum().backward()
    np.testing.assert_array_equal(b.grad, np.full(4, 3.0))
    np.testing.assert_array_equal(a.grad, np.tile(np.arange(4.0), (3, 1)))


def test_shared_subexpression_gets_both_paths():
    x = T([2.0], grad=True)
    y = x * x
    (y + y).sum().backward()
    np.testing.assert_allclose(x.grad, [8.0])


# --------------------------------------------------------------------------- matmul
def test_matmul_identity_and_zero():
    m = T([[1, 2], [3, 4]])
    np.testing.assert_array_equal(F.matmul(T(np.eye(2)), m).data, [[1, 2], [3, 4]])
    np.testing.assert_array_equal(F.matmul(T(np.eye(2)), T(np.zeros((2, 3)))).data, np.zeros((2, 3)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        F.matmul(T(np.ones((2, 3))), T(np.ones((2, 3))))


def test_matmul_gradient_of_sum():
    rng = np.random.default_rng(3)
    a, b = T(rng.standard_normal((3, 4)), grad=True), T(rng.standard_normal((4, 2)))
    F.matmul(a, b).sum().backward()
    np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T, rtol=1e-12)
    num = numeric_grad(lambda: F.matmul(a, b).sum(), [a])[0]
    assert relative_error(a.grad, num).max() < 1e-6


def test_matmul_records_mkp():
    with FlopCounter() as fc:
        F.matmul(T(np.ones((3, 4))), T(np.ones((4, 5))))
    assert fc["matmul"] == 60


# --------------------------------------------------------------------------- softmax
def test_softmax_examples():
    np.testing.assert_allclose(F.softmax_lastdim(T([0, 0, 0, 0])).data, [0.25] * 4, rtol=0, atol=1e-15)
    np.testing.assert_allclose(F.softmax_lastdim(T([1000.0, 1000.0])).data, [0.5, 0.5], rtol=0, atol=1e-15)
    z = np.array([1.0, 2.0, 3.0])
    np.testing.assert_allclose(F.softmax_lastdim(T(z)).data, np.exp(z) / np.exp(z).sum(), rtol=0, atol=1e-12)


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 7)), elements=finite))
def test_softmax_rows_are_distributions(x):
    p = F.softmax_lastdim(T(x)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)


def test_log_softmax_matches_log_of_softmax():
    x = T(np.random.default_rng(0).standard_normal((3, 5)))
    np.testing.assert_allclose(F.log_softmax_lastdim(x).data, np.log(F.softmax_lastdim(x).data), atol=1e-12)


# --------------------------------------------------------------------------- layer norm
def test_layer_norm_constant_slice_is_zero():
    out = F.layer_norm(T([[5.0, 5, 5, 5]]), T(np.ones(4)), T(np.zeros(4)), 1e-5)
    np.testing.assert_array_equal(out.data, np.zeros((1, 4)))


def test_layer_norm_zero_gamma_gives_beta():
    b = np.array([0.5, -1.0, 2.0])
    out = F.layer_norm(T(np.random.default_rng(0).standard_normal((4, 3))), T(np.zeros(3)), T(b), 1e-5)
    np.testing.assert_array_equal(out.data, np.tile(b, (4, 1)))


def test_layer_norm_moments():
    x = np.random.default_rng(1).standard_normal((4, 8)) * 3 + 2
    out = F.layer_norm(T(x), T(np.ones(8)), T(np.zeros(8)), 1e-5).data
    assert np.abs(out.mean(-1)).max() < 1e-6
    assert np.abs(out.var(-1) - 1).max() < 1e-4


def test_layer_norm_rejects_nonpositive_eps():
    with pytest.raises(ValueError):
        F.layer_norm(T(np.ones((1, 2))), T(np.ones(2)), T(np.zeros(2)), 0.0)


# --------------------------------------------------------------------------- gelu
def test_gelu_values():
    assert F.gelu(T([0.0])).data[0] == 0.0
    assert abs(F.gelu(T([20.0])).data[0] - 20.0) < 1e-4


def test_gelu_gradient_points():
    x = T([-1.0, 0.5, 2.0], grad=True)
    report = grad_check(lambda x: F.gelu(x).sum(), x)
    assert report.max_rel_error < 1e-5


@given(st.lists(st.floats(-0.7, 20), min_size=2, max_size=20))
def test_gelu_monotone_above_its_minimum(xs):
    xs = np.sort(np.array(xs))
    y = F.gelu(T(xs)).data
    assert np.all(np.diff(y) >= -1e-12)


# --------------------------------------------------------------------------- bilinear sampling
def test_bilinear_integer_coordinate_reproduces_grid_vector():
    m = np.random.default_rng(0).standard_normal((3, 4, 2))
    out = F.bilinear_sample(T(m), 1.0, 0.0).data
    assert np.array_equal(out, m[0, 1])


def test_bilinear_centre_of_2x2():
    m = T(np.array([[1.0, 2.0], [3.0, 4.0]])[:, :, None])
    assert F.bilinear_sample(m, 0.5, 0.5).data[0] == 2.5


def test_bilinear_outside_is_zero_with_zero_gradient():
    m = T(np.random.default_rng(0).standard_normal((3, 3, 2)), grad=True)
    out = F.bilinear_sample(m, -5.0, -5.0)
    np.testing.assert_array_equal(out.data, np.zeros(2))
    out.sum().backward()
    np.testing.assert_array_equal(m.grad, np.zeros((3, 3, 2)))


@given(st.integers(0, 3), st.integers(0, 2))
def test_bilinear_integer_points_bit_identical(x, y):
    m = np.random.default_rng(5).standard_normal((3, 4, 3))
    assert np.array_equal(F.bilinear_sample(T(m), float(x), float(y)).data, m[y, x])


@settings(deadline=None)
@given(st.floats(-2.5, 5.5), st.floats(-2.5, 4.5))
def test_grid_sample_agrees_with_tent_sum(x, y):
    m = np.random.default_rng(9).standard_normal((3, 4, 2))
    ref = F.bilinear_sample(T(m), T([x]), T([y])).data
    got = F.grid_sample(T(m[None]), T(np.array([[[x, y]]]))).data[0, 0]
    np.testing.assert_allclose(got, ref, rtol=0, atol=1e-12)


def test_grid_sample_rejects_mismatched_batch():
    with pytest.raises(ShapeError):
        F.grid_sample(T(np.ones((2, 3, 3, 1))), T(np.ones((3, 4, 2))))


# --------------------------------------------------------------------------- grad_check oracle
def test_grad_check_of_sum_is_exact():
    report = grad_check(lambda x: x.sum(), T(np.random.default_rng(0).standard_normal((3, 3))))
    assert report.max_rel_error < 1e-8
    assert report.passed


def test_grad_check_constant_function():
    x = T(np.random.default_rng(1).standard_normal((2, 5)))
    report = grad_check(lambda x: F.softmax_lastdim(x).sum(), x)
    assert np.abs(report.analytic).max() < 1e-12
    assert np.abs(report.numeric).max() < 1e-8


def test_grad_check_rejects_bad_step():
    with pytest.raises(ValueError):
        grad_check(lambda x: x.sum(), T([1.0]), step=0)


def test_composite_matmul_softmax_gradient():
    rng = np.random.default_rng(2)
    a, b = T(rng.standard_normal((3, 4))), T(rng.standard_normal((4, 5)))
    w = rng.standard_normal((3, 5))
    report = grad_check(lambda a, b: (F.softmax_lastdim(F.matmul(a, b)) * w).sum(), [a, b])
    assert report.passed


def test_composite_of_all_registered_ops_on_5x5():
    rng = np.random.default_rng(4)
    x = T(rng.standard_normal((5, 5)))
    g, bta = T(rng.uniform(0.5, 1.5, 5)), T(rng.standard_normal(5))
    wmat = T(rng.standard_normal((5, 5)))

    def f(x):
        h = F.gelu(F.layer_norm(F.matmul(x, wmat), g, bta))
        p = F.softmax_lastdim(h)
        s = F.bilinear_sample(F.reshape(p, (5, 5, 1)), T([1.3]), T([2.6]))
        return (p * p).sum() + s.sum()

    assert grad_check(f, x, tol=1e-4).passed


# --------------------------------------------------------------------------- flop counter
def test_flop_counter_is_additive():
    a, b, c = T(np.ones((2, 3))), T(np.ones((3, 4))), T(np.ones((4, 5)))
    with FlopCounter() as f1:
        ab = F.matmul(a, b)
    with FlopCounter() as f2:
        F.matmul(ab, c)
    with FlopCounter() as both:
        F.matmul(F.matmul(a, b), c)
    assert both.total == f1.total + f2.total


def test_flop_counter_ignores_backward():
    a = T(np.ones((2, 3)), grad=True)
    b = T(np.ones((3, 4)))
    with FlopCounter() as fc:
        y = F.matmul(a, b).sum()
        before = fc.total
        y.backward()
    assert fc.total == before


def test_forward_independent_of_thread_count():
    from threadpoolctl import threadpool_limits

    rng = np.random.default_rng(0)
    a, b = T(rng.standard_normal((64, 64))), T(rng.standard_normal((64, 64)))
    with threadpool_limits(1):
        one = F.softmax_lastdim(F.matmul(a, b)).data
    with threadpool_limits(4):
        four = F.softmax_lastdim(F.matmul(a, b)).data
    np.testing.assert_allclose(one, four, rtol=0, atol=1e-12)


# --------------------------------------------------------------------------- misc ops
def test_sqrt_safe_subgradient_zero_at_zero():
    x = T([0.0, 4.0], grad=True)
    F.sqrt_safe(x).sum().backward()
    np.testing.assert_allclose(x.grad, [0.0, 0.25])


def test_arccos_clamped_at_one():
    x = T([1.0 + 1e-12, -1.0 - 1e-12], grad=True)
    out = F.arccos_clamped(x)
    assert np.isfinite(out.data).all()
    out.sum().backward()
    assert np.isfinite(x.grad).all()


def test_cross_entropy_ignores_label():
    logits = T(np.array([[2.0, 0.0], [0.0, 5.0]]))
    full = F.cross_entropy(logits, [0, -1]).item()
    np.testing.assert_allclose(full, -np.log(np.exp(2) / (np.exp(2) + 1)), rtol=1e-12)
    with pytest.raises(ValueError):
        F.cross_entropy(logits, [-1, -1])


def test_einsum_gradients():
    rng = np.random.default_rng(7)
    a, b = T(rng.standard_normal((2, 3, 4))), T(rng.standard_normal((2, 4)))
    assert grad_check(lambda a, b: (F.einsum("bij,bj->bi", a, b) ** 2).sum(), [a, b]).passed


def test_take_and_concat_gradients():
    rng = np.random.default_rng(8)
    x = T(rng.standard_normal((2, 5, 3)))
    assert grad_check(lambda x: (F.concat([F.take(x, [4, 0, 4], 1), x], 1) ** 2).sum(), x).passed
