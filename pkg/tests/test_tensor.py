import numpy as np
import pytest

from vqseg.errors import ConfigurationError, NumericalError
from vqseg.tensor import ParamStore, Tensor, count_macs, grad_check, no_grad


def test_broadcast_add_and_mul_gradients(rng):
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((4,)), requires_grad=True)
    ((a + b) * a).sum().backward()
    np.testing.assert_allclose(a.grad, 2 * a.data + b.data)
    np.testing.assert_allclose(b.grad, a.data.sum(axis=0))


def test_shared_node_accumulates_both_paths():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = x * x + x
    y.sum().backward()
    np.testing.assert_allclose(x.grad, [7.0])


def test_backward_requires_scalar(rng):
    x = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
    with pytest.raises(ConfigurationError):
        (x * 2.0).backward()


def test_no_grad_builds_no_graph(rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_matmul_gradient(rng):
    a = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
    weights = Tensor(rng.standard_normal((2, 3, 5)))
    assert grad_check(lambda t: ((t @ w) * weights).sum(), a) < 1e-6
    assert grad_check(lambda t: ((a @ t) * weights).sum(), w) < 1e-6


def test_matmul_shape_mismatch():
    with pytest.raises(ConfigurationError, match="matmul"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_transpose_reshape_mean_gradients(rng):
    x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    weights = Tensor(rng.standard_normal((4, 6)))
    err = grad_check(lambda t: (t.transpose(2, 0, 1).reshape(4, 6) * weights).mean(), x)
    assert err < 1e-6


def test_grad_check_sum_of_squares(rng):
    x = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    assert grad_check(lambda t: (t * t).sum(), x, epsilon=1e-4) < 1e-6


def test_grad_check_constant_function(rng):
    x = Tensor(rng.standard_normal(4), requires_grad=True)
    assert grad_check(lambda t: Tensor(np.array(2.0)), x) == 0.0


def test_grad_check_rejects_bad_epsilon(rng):
    x = Tensor(rng.standard_normal(2), requires_grad=True)
    with pytest.raises(ConfigurationError):
        grad_check(lambda t: t.sum(), x, epsilon=0.1)
    with pytest.raises(ConfigurationError):
        grad_check(lambda t: t.sum(), x, epsilon=0.0)


def test_grad_check_non_finite_output():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with pytest.raises(NumericalError):
        grad_check(lambda t: t.sum() * np.inf, x)


def test_param_store_rules():
    store = ParamStore()
    store.add("w", Tensor(np.zeros(3), requires_grad=True))
    with pytest.raises(ConfigurationError, match="duplicate"):
        store.add("w", Tensor(np.zeros(3), requires_grad=True))
    with pytest.raises(ConfigurationError):
        store.add("frozen", Tensor(np.zeros(3)))
    assert list(store) == ["w"]
    assert store["w"].name == "w"
    assert store.num_elements() == 3


def test_assert_finite_names_tensor():
    t = Tensor(np.array([1.0, np.nan]), name="probe")
    with pytest.raises(NumericalError, match="probe"):
        t.assert_finite()


def test_count_macs_counts_matmul(rng):
    a = Tensor(rng.standard_normal((2, 3)))
    b = Tensor(rng.standard_normal((3, 4)))
    with count_macs() as counter:
        a @ b
    assert counter["macs"] == 2 * 4 * 3
