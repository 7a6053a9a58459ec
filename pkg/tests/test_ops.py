import numpy as np
import pytest

from vqseg import ops
from vqseg.errors import ConfigurationError
from vqseg.tensor import Tensor, grad_check


def naive_conv2d(x, k, stride=1, padding=0, groups=1):
    N, C, H, W = x.shape
    O, Cg, kH, kW = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = (H + 2 * padding - kH) // stride + 1
    Wo = (W + 2 * padding - kW) // stride + 1
    Og = O // groups
    out = np.zeros((N, O, Ho, Wo))
    for n in range(N):
        for o in range(O):
            g = o // Og
            for y in range(Ho):
                for x_ in range(Wo):
                    for c in range(Cg):
                        for i in range(kH):
                            for j in range(kW):
                                out[n, o, y, x_] += xp[n, g * Cg + c, y * stride + i, x_ * stride + j] * k[o, c, i, j]
    return out


def weighted_sum(y, weights):
    return (y * Tensor(weights)).sum()


def test_conv2d_identity_kernel(rng):
    x = rng.standard_normal((2, 3, 5, 5))
    k = np.eye(3).reshape(3, 3, 1, 1)
    out = ops.conv2d(Tensor(x), Tensor(k))
    np.testing.assert_array_equal(out.data, x)


def test_conv2d_zero_input(rng):
    out = ops.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(rng.standard_normal((3, 2, 3, 3))), padding=1)
    assert out.shape == (1, 3, 4, 4)
    assert not out.data.any()


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_matches_nested_loops(rng, stride, padding):
    x = rng.standard_normal((2, 4, 6, 5))
    k = rng.standard_normal((6, 4, 3, 3))
    out = ops.conv2d(Tensor(x), Tensor(k), stride=stride, padding=padding)
    np.testing.assert_allclose(out.data, naive_conv2d(x, k, stride, padding), atol=1e-12)


def test_depthwise_conv_matches_nested_loops(rng):
    x = rng.standard_normal((1, 3, 4, 4))
    k = rng.standard_normal((3, 1, 3, 3))
    out = ops.conv2d(Tensor(x), Tensor(k), padding=1, groups=3)
    np.testing.assert_allclose(out.data, naive_conv2d(x, k, 1, 1, groups=3), atol=1e-12)


def test_depthwise_equals_per_channel_convolution(rng):
    x = rng.standard_normal((2, 3, 5, 5))
    k = rng.standard_normal((3, 1, 3, 3))
    out = ops.conv2d(Tensor(x), Tensor(k), padding=1, groups=3).data
    for c in range(3):
        single = ops.conv2d(Tensor(x[:, c:c + 1]), Tensor(k[c:c + 1]), padding=1).data
        np.testing.assert_allclose(out[:, c:c + 1], single, atol=1e-12)


def test_conv2d_output_size(rng):
    out = ops.conv2d(Tensor(rng.standard_normal((1, 2, 7, 9))), Tensor(rng.standard_normal((4, 2, 3, 3))), stride=2, padding=1)
    assert out.shape == (1, 4, (7 + 2 - 3) // 2 + 1, (9 + 2 - 3) // 2 + 1)


def test_conv2d_shape_mismatch_names_both_shapes():
    with pytest.raises(ConfigurationError, match=r"\(1, 3, 4, 4\).*\(2, 2, 3, 3\)"):
        ops.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 2, 3, 3))))


def test_conv2d_gradients(rng):
    for _ in range(5):
        x = Tensor(rng.standard_normal((2, 4, 5, 5)), requires_grad=True)
        k = Tensor(rng.standard_normal((4, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal(4), requires_grad=True)
        w = rng.standard_normal((2, 4, 3, 3))
        assert grad_check(lambda t: weighted_sum(ops.conv2d(t, k, 2, 1, 2, b), w), x) < 1e-4
        assert grad_check(lambda t: weighted_sum(ops.conv2d(x, t, 2, 1, 2, b), w), k) < 1e-4
        assert grad_check(lambda t: weighted_sum(ops.conv2d(x, k, 2, 1, 2, t), w), b) < 1e-4


def test_transpose_conv_single_pixel():
    out = ops.conv2d_transpose(Tensor(np.full((1, 1, 1, 1), 3.5)), Tensor(np.ones((1, 1, 2, 2))), stride=2)
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 3.5))


def test_transpose_conv_zero_input(rng):
    out = ops.conv2d_transpose(Tensor(np.zeros((1, 2, 3, 3))), Tensor(rng.standard_normal((2, 4, 2, 2))))
    assert out.shape == (1, 4, 6, 6)
    assert not out.data.any()


def test_transpose_conv_rejects_zero_size():
    with pytest.raises(ConfigurationError):
        ops.conv2d_transpose(Tensor(np.zeros((1, 2, 0, 3))), Tensor(np.ones((2, 2, 2, 2))))


@pytest.mark.parametrize("stride,ksize", [(2, 2), (2, 3), (1, 3)])
def test_transpose_conv_is_adjoint_of_conv(rng, stride, ksize):
    # conv2d kernel (O, C, k, k) pairs with a transpose kernel (O, C, k, k) read as (Cin=O, Cout=C)
    k = rng.standard_normal((3, 2, ksize, ksize))
    A = rng.standard_normal((1, 2, (4 - 1) * stride + ksize, (5 - 1) * stride + ksize))
    B = rng.standard_normal((1, 3, 4, 5))
    lhs = np.sum(ops.conv2d(Tensor(A), Tensor(k), stride=stride).data * B)
    rhs = np.sum(A * ops.conv2d_transpose(Tensor(B), Tensor(k), stride=stride).data)
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_transpose_conv_gradients(rng):
    x = Tensor(rng.standard_normal((2, 3, 3, 3)), requires_grad=True)
    k = Tensor(rng.standard_normal((3, 2, 2, 2)), requires_grad=True)
    b = Tensor(rng.standard_normal(2), requires_grad=True)
    w = rng.standard_normal((2, 2, 6, 6))
    assert grad_check(lambda t: weighted_sum(ops.conv2d_transpose(t, k, 2, b), w), x) < 1e-4
    assert grad_check(lambda t: weighted_sum(ops.conv2d_transpose(x, t, 2, b), w), k) < 1e-4
    assert grad_check(lambda t: weighted_sum(ops.conv2d_transpose(x, k, 2, t), w), b) < 1e-4


def test_softmax_rows(rng):
    y = ops.softmax(Tensor(rng.standard_normal((4, 7)) * 10), axis=-1).data
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-9)
    assert np.all(y > 0)


def test_softmax_gradient(rng):
    for axis in (0, -1):
        x = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
        w = rng.standard_normal((3, 5))
        assert grad_check(lambda t: weighted_sum(ops.softmax(t, axis=axis), w), x) < 1e-4


def test_layer_norm_statistics_and_gradient(rng):
    x = Tensor(rng.standard_normal((2, 3, 6)) * 3 + 1, requires_grad=True)
    gamma = Tensor(rng.standard_normal(6), requires_grad=True)
    beta = Tensor(rng.standard_normal(6), requires_grad=True)
    plain = ops.layer_norm(x, Tensor(np.ones(6)), Tensor(np.zeros(6))).data
    np.testing.assert_allclose(plain.mean(axis=-1), 0.0, atol=1e-12)
    w = rng.standard_normal((2, 3, 6))
    assert grad_check(lambda t: weighted_sum(ops.layer_norm(t, gamma, beta), w), x) < 1e-4
    assert grad_check(lambda t: weighted_sum(ops.layer_norm(x, t, beta), w), gamma) < 1e-4
    assert grad_check(lambda t: weighted_sum(ops.layer_norm(x, gamma, t), w), beta) < 1e-4


def test_batch_norm_train_gradient(rng):
    x = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
    gamma = Tensor(rng.standard_normal(2), requires_grad=True)
    beta = Tensor(rng.standard_normal(2), requires_grad=True)
    w = rng.standard_normal((3, 2, 3, 3))

    def f(t):
        return weighted_sum(ops.batch_norm(t, gamma, beta, np.zeros(2), np.ones(2), training=True), w)

    assert grad_check(f, x) < 1e-4


def test_batch_norm_eval_gradient_and_running_stats(rng):
    x = rng.standard_normal((4, 2, 3, 3)) * 2 + 5
    mean, var = np.zeros(2), np.ones(2)
    ops.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), mean, var, training=True, momentum=0.1)
    np.testing.assert_allclose(mean, 0.1 * x.mean(axis=(0, 2, 3)))
    n = x.size // 2
    np.testing.assert_allclose(var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * n / (n - 1))

    xt = Tensor(x, requires_grad=True)
    gamma = Tensor(rng.standard_normal(2), requires_grad=True)
    w = rng.standard_normal(x.shape)
    frozen_mean, frozen_var = mean.copy(), var.copy()
    err = grad_check(
        lambda t: weighted_sum(ops.batch_norm(t, gamma, Tensor(np.zeros(2)), frozen_mean, frozen_var, training=False), w),
        xt,
    )
    assert err < 1e-4
    np.testing.assert_array_equal(frozen_mean, mean)


def test_silu_gradient(rng):
    x = Tensor(rng.standard_normal((2, 3, 4)) * 3, requires_grad=True)
    w = rng.standard_normal((2, 3, 4))
    assert grad_check(lambda t: weighted_sum(ops.silu(t), w), x) < 1e-4


def test_concat_gradient_and_shape_check(rng):
    a = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((1, 3, 3, 3)), requires_grad=True)
    w = rng.standard_normal((1, 5, 3, 3))
    assert grad_check(lambda t: weighted_sum(ops.concat([t, b]), w), a) < 1e-6
    assert grad_check(lambda t: weighted_sum(ops.concat([a, t]), w), b) < 1e-6
    with pytest.raises(ConfigurationError):
        ops.concat([a, Tensor(np.zeros((1, 2, 4, 3)))])


def test_upsample_nearest(rng):
    x = Tensor(rng.standard_normal((1, 2, 3, 4)), requires_grad=True)
    y = ops.upsample_nearest2x(x)
    assert y.shape == (1, 2, 6, 8)
    np.testing.assert_array_equal(y.data[:, :, 1::2, 1::2], x.data)
    w = rng.standard_normal((1, 2, 6, 8))
    assert grad_check(lambda t: weighted_sum(ops.upsample_nearest2x(t), w), x) < 1e-6


def test_composed_graph_gradient(rng):
    x = Tensor(rng.standard_normal((1, 2, 4, 4)), requires_grad=True)
    k1 = Tensor(rng.standard_normal((3, 2, 3, 3)))
    k2 = Tensor(rng.standard_normal((2, 3, 2, 2)))
    w = rng.standard_normal((1, 2, 8, 8))

    def f(t):
        h = ops.silu(ops.conv2d(t, k1, padding=1))
        return weighted_sum(ops.conv2d_transpose(h, Tensor(k2.data.transpose(1, 0, 2, 3))) + ops.upsample_nearest2x(t), w)

    assert grad_check(f, x) < 1e-4
