import numpy as np
import pytest

from hsigan.tensor import (Parameter, ShapeError, elementwise, grad_check, make_rng,
                           reduce)


def test_elementwise_add():
    np.testing.assert_array_equal(elementwise("add", [1, 2], [3, 4]), [4, 6])


def test_elementwise_scalar_zero():
    np.testing.assert_array_equal(elementwise("mul", [2, 3], 0), [0, 0])


def test_elementwise_division_by_zero():
    with pytest.raises(ZeroDivisionError, match="division by zero"):
        elementwise("div", [1.0], [0.0])


def test_elementwise_shape_mismatch_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2,\).*\(3,\)"):
        elementwise("sub", [1, 2], [1, 2, 3])


def test_elementwise_commutes_with_reshape():
    rng = make_rng(1)
    a, b = rng.standard_normal((2, 6)), rng.standard_normal((2, 6))
    lhs = elementwise("max", a, b).reshape(3, 4)
    rhs = elementwise("max", a.reshape(3, 4), b.reshape(3, 4))
    np.testing.assert_array_equal(lhs, rhs)


def test_reduce_examples():
    assert reduce("mean", [[1, 3], [5, 7]], axes=[0, 1]) == 4
    a = np.array([[1.0, 2.0]])
    out = reduce("sum", a, axes=[])
    np.testing.assert_array_equal(out, a)
    assert out is not a
    assert reduce("max", [-1, -5], axes=[0]) == -1


def test_reduce_keepdims_and_errors():
    a = np.ones((2, 3))
    assert reduce("sum", a, axes=[1], keepdims=True).shape == (2, 1)
    with pytest.raises(ValueError):
        reduce("sum", np.ones((2, 0)), axes=[1])
    with pytest.raises(ValueError):
        reduce("sum", a, axes=[2])


def test_mean_is_sum_over_n():
    a = make_rng(3).standard_normal((7, 11))
    m = reduce("mean", a, axes=[1])
    s = reduce("sum", a, axes=[1]) / 11
    np.testing.assert_allclose(m, s, rtol=0, atol=11 * np.finfo(float).eps * np.abs(s).max())


def test_reshape_is_metadata_only():
    a = np.arange(24.0)
    b = a.reshape(2, 3, 4)
    assert np.shares_memory(a, b)
    np.testing.assert_array_equal(b.reshape(-1), a)


def test_grad_check_quadratic():
    theta = Parameter("theta", np.array([1.0, 2.0]))

    def f():
        return float(np.sum(theta.value ** 2))

    def analytic():
        theta.grad[...] = 2 * theta.value

    rep = grad_check(f, [theta], analytic=analytic)
    np.testing.assert_allclose(theta.grad, [2, 4])
    assert rep.max_rel_error < 1e-8


def test_grad_check_reports_kink():
    theta = Parameter("theta", np.array([0.0]))

    def f():
        return float(np.abs(theta.value).sum())

    def analytic():
        theta.grad[...] = np.sign(theta.value)

    rep = grad_check(f, [theta], analytic=analytic)
    assert rep.kinks == [("theta", 0)]
    assert rep.max_rel_error == 0.0


def test_grad_check_detects_wrong_gradient():
    theta = Parameter("theta", np.array([1.0, -0.5]))

    def f():
        return float(np.sum(theta.value ** 3))

    def analytic():
        theta.grad[...] = 2 * theta.value ** 2

    rep = grad_check(f, [theta], analytic=analytic)
    assert rep.max_rel_error > 0.1
    assert not rep.kinks


def test_grad_check_rejects_impure_function():
    theta = Parameter("theta", np.array([1.0]))
    calls = []

    def f():
        calls.append(1)
        return float(len(calls))

    with pytest.raises(RuntimeError, match="function not pure"):
        grad_check(f, [theta])


def test_rng_is_reproducible():
    assert make_rng(5).standard_normal(3).tolist() == make_rng(5).standard_normal(3).tolist()


def test_grad_check_tolerates_objective_that_refills_grads():
    a = Parameter("a", np.array([0.3, -0.7]))
    b = Parameter("b", np.array([1.1]))

    def f():
        a.grad[...] = 2 * a.value * b.value[0] ** 2
        b.grad[...] = 2 * b.value * np.sum(a.value ** 2)
        return float(np.sum(a.value ** 2) * b.value[0] ** 2)

    rep = grad_check(f, [a, b], eps=1e-3, analytic=f)
    assert rep.max_rel_error < 1e-6, rep
