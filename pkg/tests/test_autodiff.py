import numpy as np
import pytest

from projsynth import autodiff as ad
from projsynth.errors import DimensionError, GraphError, ParameterError

from oracles import bilinear_corner_aligned, check_gradient, conv2d_loops


def randn(rng, *shape, dtype=np.float32):
    return rng.standard_normal(shape).astype(dtype)


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

class TestConv2d:
    def test_scalar_scaling(self):
        x = ad.tensor(np.ones((1, 1, 3, 3)))
        w = ad.tensor(np.full((1, 1, 1, 1), 2.0))
        out = ad.conv2d(x, w, stride=1, pad=0)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 2.0, dtype=np.float32))

    def test_stride2_shape(self):
        rng = np.random.default_rng(0)
        x = ad.tensor(randn(rng, 1, 1, 8, 8))
        w = ad.tensor(randn(rng, 4, 1, 3, 3))
        out = ad.conv2d(x, w, stride=2, pad=1)
        assert out.shape == (1, 4, 4, 4)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        x = randn(rng, 1, 2, 5, 5)
        w = randn(rng, 3, 2, 3, 3)
        b = randn(rng, 3)
        got = ad.conv2d(ad.tensor(x), ad.tensor(w), ad.tensor(b), stride=1, pad=1)
        want = conv2d_loops(x.astype(np.float64), w.astype(np.float64), b.astype(np.float64), 1, 1)
        np.testing.assert_allclose(got.data, want, atol=1e-6)

    def test_random_geometries_vs_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            stride = int(rng.integers(1, 3))
            pad = int(rng.integers(0, 2))
            kh, kw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            h = int(rng.integers(max(1, kh - 2 * pad), 8))
            w = int(rng.integers(max(1, kw - 2 * pad), 8))
            if h + 2 * pad < kh or w + 2 * pad < kw:
                continue
            x = randn(rng, 2, 2, h, w)
            k = randn(rng, 3, 2, kh, kw)
            got = ad.conv2d(ad.tensor(x), ad.tensor(k), stride=stride, pad=pad)
            want = conv2d_loops(x.astype(np.float64), k.astype(np.float64), None, stride, pad)
            np.testing.assert_allclose(got.data, want, atol=1e-5)

    def test_channel_mismatch_raises(self):
        x = ad.tensor(np.zeros((1, 2, 4, 4)))
        w = ad.tensor(np.zeros((1, 3, 3, 3)))
        with pytest.raises(DimensionError):
            ad.conv2d(x, w, stride=1, pad=1)

    def test_kernel_larger_than_padded_input_raises(self):
        x = ad.tensor(np.zeros((1, 1, 2, 2)))
        w = ad.tensor(np.zeros((1, 1, 3, 3)))
        with pytest.raises(ParameterError):
            ad.conv2d(x, w, stride=1, pad=0)


# ---------------------------------------------------------------------------
# conv2d_transpose
# ---------------------------------------------------------------------------

class TestConv2dTranspose:
    def test_inverts_stride2_shape(self):
        rng = np.random.default_rng(3)
        x = ad.tensor(randn(rng, 1, 2, 4, 4))
        w = ad.tensor(randn(rng, 2, 1, 3, 3))
        out = ad.conv2d_transpose(x, w, stride=2, pad=1, out_pad=1)
        assert out.shape == (1, 1, 8, 8)

    def test_zero_kernel_zero_output(self):
        x = ad.tensor(np.random.default_rng(4).standard_normal((1, 2, 4, 4)), dtype=np.float32)
        w = ad.tensor(np.zeros((2, 3, 3, 3)))
        out = ad.conv2d_transpose(x, w, stride=2, pad=1, out_pad=1)
        np.testing.assert_array_equal(out.data, np.zeros((1, 3, 8, 8), dtype=np.float32))

    def test_out_pad_must_be_below_stride(self):
        x = ad.tensor(np.zeros((1, 1, 4, 4)))
        w = ad.tensor(np.zeros((1, 1, 3, 3)))
        with pytest.raises(ParameterError):
            ad.conv2d_transpose(x, w, stride=2, pad=1, out_pad=2)

    def test_forward_equals_conv_input_gradient(self):
        # convT(y, w) must equal d<conv(x, w), y>/dx for matching geometry.
        rng = np.random.default_rng(5)
        for stride, pad, kh, h in [(1, 0, 3, 6), (2, 1, 3, 8), (2, 0, 2, 7)]:
            x = ad.tensor(randn(rng, 1, 2, h, h), requires_grad=True)
            w = ad.tensor(randn(rng, 3, 2, kh, kh))
            y = ad.conv2d(x, w, stride=stride, pad=pad)
            cot = randn(rng, *y.shape)
            ad.backward(ad.tsum(ad.mul(y, ad.tensor(cot))))
            out_pad = h - ((y.shape[2] - 1) * stride - 2 * pad + kh)
            via_transpose = ad.conv2d_transpose(
                ad.tensor(cot), w, stride=stride, pad=pad, out_pad=out_pad
            )
            np.testing.assert_allclose(via_transpose.data, x.grad, rtol=1e-5, atol=1e-5)

    def test_adjoint_inner_product(self):
        rng = np.random.default_rng(6)
        for stride, pad, kh, h in [(1, 1, 3, 5), (2, 1, 3, 8), (2, 0, 3, 9)]:
            x = randn(rng, 1, 2, h, h, dtype=np.float64)
            w = ad.tensor(randn(rng, 4, 2, kh, kh, dtype=np.float64), dtype=np.float64)
            y_shape = ad.conv2d(ad.tensor(x, dtype=np.float64), w, stride=stride, pad=pad).shape
            y = randn(rng, *y_shape, dtype=np.float64)
            lhs = float((ad.conv2d(ad.tensor(x, dtype=np.float64), w, stride=stride, pad=pad).data * y).sum())
            out_pad = h - ((y_shape[2] - 1) * stride - 2 * pad + kh)
            xt = ad.conv2d_transpose(ad.tensor(y, dtype=np.float64), w, stride=stride, pad=pad, out_pad=out_pad)
            rhs = float((x * xt.data).sum())
            assert abs(lhs - rhs) <= 1e-4 * max(abs(lhs), abs(rhs))


# ---------------------------------------------------------------------------
# resize_bilinear
# ---------------------------------------------------------------------------

class TestResizeBilinear:
    def test_same_size_is_bit_identical(self):
        rng = np.random.default_rng(7)
        x = ad.tensor(randn(rng, 1, 2, 5, 6))
        out = ad.resize_bilinear(x, 5, 6)
        assert np.array_equal(out.data, x.data)

    def test_constant_preserved_exactly(self):
        x = ad.tensor(np.full((1, 1, 3, 3), 0.1, dtype=np.float32))
        for oh, ow in [(1, 1), (2, 5), (7, 7), (8, 3)]:
            out = ad.resize_bilinear(x, oh, ow)
            assert np.array_equal(out.data, np.full((1, 1, oh, ow), np.float32(0.1)))

    def test_2x2_to_4x4_oracle(self):
        img = np.array([[0.0, 1.0], [2.0, 3.0]])
        out = ad.resize_bilinear(ad.tensor(img.reshape(1, 1, 2, 2), dtype=np.float64), 4, 4)
        want = bilinear_corner_aligned(img, 4, 4)
        np.testing.assert_allclose(out.data[0, 0], want, atol=1e-12)
        np.testing.assert_allclose(
            out.data[0, 0, [0, 0, -1, -1], [0, -1, 0, -1]], [0.0, 1.0, 2.0, 3.0], atol=0
        )

    def test_random_sizes_vs_oracle(self):
        rng = np.random.default_rng(8)
        for _ in range(10):
            h, w = int(rng.integers(1, 9)), int(rng.integers(1, 9))
            oh, ow = int(rng.integers(1, 12)), int(rng.integers(1, 12))
            img = rng.standard_normal((h, w))
            out = ad.resize_bilinear(ad.tensor(img.reshape(1, 1, h, w), dtype=np.float64), oh, ow)
            np.testing.assert_allclose(out.data[0, 0], bilinear_corner_aligned(img, oh, ow), atol=1e-12)

    def test_invalid_target_raises(self):
        with pytest.raises(ParameterError):
            ad.resize_bilinear(ad.tensor(np.zeros((1, 1, 2, 2))), 0, 4)


# ---------------------------------------------------------------------------
# concat, activations, dropout
# ---------------------------------------------------------------------------

class TestConcat:
    def test_order_and_channel_count(self):
        rng = np.random.default_rng(9)
        a = randn(rng, 1, 2, 3, 3)
        b = randn(rng, 1, 3, 3, 3)
        out = ad.concat_channels(ad.tensor(a), ad.tensor(b))
        assert out.shape == (1, 5, 3, 3)
        np.testing.assert_array_equal(out.data[:, :2], a)
        np.testing.assert_array_equal(out.data[:, 2:], b)

    def test_concat_then_slice_recovers(self):
        rng = np.random.default_rng(10)
        a = randn(rng, 2, 2, 4, 4)
        out = ad.concat_channels(ad.tensor(a), ad.tensor(np.zeros((2, 1, 4, 4), np.float32)))
        np.testing.assert_array_equal(out.data[:, :2], a)

    def test_gradient_splits(self):
        a = ad.tensor(np.ones((1, 2, 2, 2)), requires_grad=True)
        b = ad.tensor(np.ones((1, 3, 2, 2)), requires_grad=True)
        ad.backward(ad.tsum(ad.concat_channels(a, b)))
        np.testing.assert_array_equal(a.grad, np.ones_like(a.data))
        np.testing.assert_array_equal(b.grad, np.ones_like(b.data))

    def test_spatial_mismatch_raises(self):
        with pytest.raises(DimensionError):
            ad.concat_channels(
                ad.tensor(np.zeros((1, 1, 2, 2))), ad.tensor(np.zeros((1, 1, 3, 2)))
            )


class TestActivations:
    def test_relu_values(self):
        out = ad.activation(ad.tensor([-1.0, 2.0]), "relu")
        np.testing.assert_array_equal(out.data, [0.0, 2.0])

    def test_lrelu_values(self):
        out = ad.activation(ad.tensor([-1.0, 2.0]), "lrelu", slope=0.2)
        np.testing.assert_allclose(out.data, [-0.2, 2.0], atol=1e-7)

    def test_relu_gradient(self):
        x = ad.tensor([2.0, -2.0], requires_grad=True)
        ad.backward(ad.tsum(ad.relu(x)))
        np.testing.assert_array_equal(x.grad, [1.0, 0.0])

    def test_bad_slope(self):
        with pytest.raises(ParameterError):
            ad.lrelu(ad.tensor([1.0]), slope=1.5)


class TestDropout:
    def test_keep_one_is_identity(self):
        x = ad.tensor(np.arange(8, dtype=np.float32))
        out = ad.dropout(x, 1.0, training=True, rng=0)
        np.testing.assert_array_equal(out.data, x.data)

    def test_eval_mode_is_identity(self):
        x = ad.tensor(np.arange(8, dtype=np.float32))
        out = ad.dropout(x, 0.5, training=False)
        np.testing.assert_array_equal(out.data, x.data)

    def test_monte_carlo_mean(self):
        x = ad.tensor(np.ones(100_000, dtype=np.float32))
        out = ad.dropout(x, 0.5, training=True, rng=123)
        assert abs(float(out.data.mean()) - 1.0) < 0.02

    def test_seed_reproducible_bitwise(self):
        x = ad.tensor(np.random.default_rng(11).standard_normal(256), dtype=np.float32)
        a = ad.dropout(x, 0.5, training=True, rng=42)
        b = ad.dropout(x, 0.5, training=True, rng=42)
        assert np.array_equal(a.data, b.data)

    def test_bad_keep_prob(self):
        with pytest.raises(ParameterError):
            ad.dropout(ad.tensor([1.0]), 0.0, training=True, rng=0)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

class TestNormalize:
    def test_constant_channel_maps_to_zero(self):
        x = ad.tensor(np.full((1, 2, 4, 4), 3.7, dtype=np.float32))
        gamma = ad.tensor(np.ones(2))
        beta = ad.tensor(np.zeros(2))
        out = ad.normalize(x, "instance", gamma, beta)
        np.testing.assert_array_equal(out.data, np.zeros_like(x.data))

    def test_instance_stats(self):
        rng = np.random.default_rng(12)
        x = ad.tensor(rng.standard_normal((2, 3, 8, 8)) * 4 + 2, dtype=np.float64)
        out = ad.normalize(x, "instance", ad.tensor(np.ones(3), dtype=np.float64),
                           ad.tensor(np.zeros(3), dtype=np.float64), eps=1e-12)
        means = out.data.mean(axis=(2, 3))
        variances = out.data.var(axis=(2, 3))
        assert np.abs(means).max() < 1e-6
        assert np.abs(variances - 1).max() < 1e-4

    def test_layer_mode_two_values(self):
        x = ad.tensor(np.array([1.0, 3.0]).reshape(1, 2, 1, 1), dtype=np.float64)
        out = ad.normalize(x, "layer", ad.tensor(np.ones(2), dtype=np.float64),
                           ad.tensor(np.zeros(2), dtype=np.float64), eps=1e-14)
        np.testing.assert_allclose(out.data.reshape(-1), [-1.0, 1.0], atol=1e-6)

    def test_unknown_mode(self):
        with pytest.raises(ParameterError):
            ad.normalize(ad.tensor(np.zeros((1, 1, 2, 2))), "batch",
                         ad.tensor(np.ones(1)), ad.tensor(np.zeros(1)))


# ---------------------------------------------------------------------------
# max pooling
# ---------------------------------------------------------------------------

class TestMaxPool:
    def test_forward(self):
        x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
        out = ad.max_pool2d(ad.tensor(x), 2)
        np.testing.assert_array_equal(out.data[0, 0], [[5, 7], [13, 15]])

    def test_gradient_routes_to_max(self):
        x = ad.tensor(np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4), requires_grad=True)
        ad.backward(ad.tsum(ad.max_pool2d(x, 2)))
        want = np.zeros((4, 4), dtype=np.float32)
        want[1, 1] = want[1, 3] = want[3, 1] = want[3, 3] = 1
        np.testing.assert_array_equal(x.grad[0, 0], want)

    def test_odd_size_raises(self):
        with pytest.raises(ParameterError):
            ad.max_pool2d(ad.tensor(np.zeros((1, 1, 5, 4))), 2)


# ---------------------------------------------------------------------------
# backward contract
# ---------------------------------------------------------------------------

class TestBackward:
    def test_sum_relu_positive_gives_ones(self):
        x = ad.tensor(np.full((3, 3), 2.0), requires_grad=True)
        ad.backward(ad.tsum(ad.relu(x)))
        np.testing.assert_array_equal(x.grad, np.ones((3, 3), dtype=np.float32))

    def test_off_path_parameter_gets_zero_grad(self):
        x = ad.tensor(np.ones(4), requires_grad=True)
        unused = ad.tensor(np.ones(3), requires_grad=True)
        ad.backward(ad.tsum(x), leaves=[x, unused])
        np.testing.assert_array_equal(unused.grad, np.zeros(3, dtype=np.float32))

    def test_non_scalar_loss_raises(self):
        x = ad.tensor(np.ones(4), requires_grad=True)
        with pytest.raises(GraphError):
            ad.backward(ad.relu(x))

    def test_fanout_accumulates(self):
        x = ad.tensor(np.ones(3), requires_grad=True)
        y = ad.add(x, x)
        ad.backward(ad.tsum(y))
        np.testing.assert_array_equal(x.grad, np.full(3, 2.0, dtype=np.float32))

    def test_repeated_backward_accumulates(self):
        x = ad.tensor(np.ones(3), requires_grad=True)
        loss = ad.tsum(ad.scale(x, 3.0))
        ad.backward(loss)
        ad.backward(loss)
        np.testing.assert_array_equal(x.grad, np.full(3, 6.0, dtype=np.float32))

    def test_composite_finite_difference_32_and_64_bit(self):
        # conv2d -> lrelu -> mean-normalized l1, checked at both precisions.
        # The mean form keeps the loss O(1) so 32-bit round-off does not
        # swamp the finite-difference quotient.
        for dtype in (np.float32, np.float64):
            rng = np.random.default_rng(13)
            x = ad.tensor(rng.standard_normal((1, 2, 6, 6)), dtype=dtype)
            w = ad.tensor(0.4 * rng.standard_normal((3, 2, 3, 3)), requires_grad=True, dtype=dtype)
            b = ad.tensor(0.1 * rng.standard_normal(3), requires_grad=True, dtype=dtype)
            target = ad.tensor(rng.standard_normal((1, 3, 6, 6)), dtype=dtype)

            def build():
                act = ad.lrelu(ad.conv2d(x, w, b, stride=1, pad=1), 0.2)
                return ad.tmean(ad.absolute(ad.sub(act, target)))

            check_gradient(build, [w, b], np.random.default_rng(14), n_samples=8)


# ---------------------------------------------------------------------------
# per-op gradient checks (64-bit)
# ---------------------------------------------------------------------------

def _gc(build, params, seed):
    return check_gradient(build, params, np.random.default_rng(seed), n_samples=6)


class TestGradientChecks:
    def test_conv2d(self):
        rng = np.random.default_rng(20)
        x = ad.tensor(rng.standard_normal((2, 2, 6, 6)), requires_grad=True, dtype=np.float64)
        w = ad.tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True, dtype=np.float64)
        b = ad.tensor(rng.standard_normal(3), requires_grad=True, dtype=np.float64)
        cot = ad.tensor(rng.standard_normal((2, 3, 3, 3)), dtype=np.float64)
        _gc(lambda: ad.tsum(ad.mul(ad.conv2d(x, w, b, stride=2, pad=1), cot)), [x, w, b], 21)

    def test_conv2d_transpose(self):
        rng = np.random.default_rng(22)
        x = ad.tensor(rng.standard_normal((1, 3, 4, 4)), requires_grad=True, dtype=np.float64)
        w = ad.tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True, dtype=np.float64)
        b = ad.tensor(rng.standard_normal(2), requires_grad=True, dtype=np.float64)
        cot = ad.tensor(rng.standard_normal((1, 2, 8, 8)), dtype=np.float64)
        _gc(
            lambda: ad.tsum(ad.mul(ad.conv2d_transpose(x, w, b, stride=2, pad=1, out_pad=1), cot)),
            [x, w, b],
            23,
        )

    def test_resize(self):
        rng = np.random.default_rng(24)
        x = ad.tensor(rng.standard_normal((1, 2, 5, 4)), requires_grad=True, dtype=np.float64)
        cot = ad.tensor(rng.standard_normal((1, 2, 9, 7)), dtype=np.float64)
        _gc(lambda: ad.tsum(ad.mul(ad.resize_bilinear(x, 9, 7), cot)), [x], 25)

    def test_normalize_both_modes(self):
        rng = np.random.default_rng(26)
        for mode in ("instance", "layer"):
            x = ad.tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True, dtype=np.float64)
            gamma = ad.tensor(1 + 0.1 * rng.standard_normal(3), requires_grad=True, dtype=np.float64)
            beta = ad.tensor(0.1 * rng.standard_normal(3), requires_grad=True, dtype=np.float64)
            cot = ad.tensor(rng.standard_normal((2, 3, 4, 4)), dtype=np.float64)
            _gc(lambda: ad.tsum(ad.mul(ad.normalize(x, mode, gamma, beta), cot)), [x, gamma, beta], 27)

    def test_pool_lrelu_mean(self):
        rng = np.random.default_rng(28)
        x = ad.tensor(rng.standard_normal((1, 2, 4, 4)), requires_grad=True, dtype=np.float64)
        _gc(lambda: ad.tmean(ad.lrelu(ad.max_pool2d(x, 2), 0.1)), [x], 29)

    def test_dropout_fixed_mask(self):
        rng = np.random.default_rng(30)
        x = ad.tensor(rng.standard_normal(32), requires_grad=True, dtype=np.float64)
        _gc(lambda: ad.tsum(ad.dropout(x, 0.5, training=True, rng=77)), [x], 31)
