"""Tensor core: forward values against naive oracles, gradients against
central finite differences, and the structural conv/transposed-conv
relationships (linearity, adjointness)."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hrfseg.gradcheck import finite_difference_check
from hrfseg.tensor import (
    ConvSpec,
    Tensor,
    concat_channels,
    conv2d,
    log_softmax_channels,
    max_pool2d,
    no_grad,
    relu,
    sigmoid,
    slice_channels,
    softmax_channels,
    softplus,
    transposed_conv2d,
)

FD_TOL = 1e-6


def naive_conv2d(x, w, b, stride, padding):
    """Nested-loop convolution oracle, independent of the im2col path."""
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    assert ci == c
    if padding == "same":
        oh, ow = math.ceil(h / stride), math.ceil(wd / stride)
        total_h = max((oh - 1) * stride + kh - h, 0)
        total_w = max((ow - 1) * stride + kw - wd, 0)
        pt, pl = total_h // 2, total_w // 2
    else:
        oh, ow = (h - kh) // stride + 1, (wd - kw) // stride + 1
        pt = pl = 0
    out = np.zeros((n, co, oh, ow))
    for bi in range(n):
        for f in range(co):
            for oy in range(oh):
                for ox in range(ow):
                    acc = 0.0
                    for ch in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                yy = oy * stride + i - pt
                                xx = ox * stride + j - pl
                                if 0 <= yy < h and 0 <= xx < wd:
                                    acc += x[bi, ch, yy, xx] * w[f, ch, i, j]
                    out[bi, f, oy, ox] = acc + b[f]
    return out


def scalarize(t):
    """Fixed-weight contraction to a 0-d tensor for gradient checks."""
    rng = np.random.default_rng(99)
    w = rng.normal(size=t.shape)
    return (t * Tensor(w)).sum()


class TestConv2d:
    def test_all_ones_center_is_nine(self):
        spec = ConvSpec(1, 1)
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        b = Tensor(np.zeros(1))
        out = conv2d(x, spec, w, b)
        assert out.data[0, 0, 1, 1] == 9.0

    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 1, 6, 7))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        out = conv2d(Tensor(x), ConvSpec(1, 1), Tensor(w), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, x)

    @pytest.mark.parametrize("stride,padding,shape", [
        (1, "same", (1, 2, 8, 8)),
        (2, "same", (1, 2, 8, 8)),
        (1, "valid", (2, 3, 7, 9)),
        (2, "valid", (1, 2, 9, 9)),
        (2, "same", (2, 1, 5, 6)),
    ])
    def test_matches_naive_oracle(self, stride, padding, shape):
        rng = np.random.default_rng(42)
        x = rng.normal(size=shape)
        co = 4
        w = rng.normal(size=(co, shape[1], 3, 3))
        b = rng.normal(size=co)
        out = conv2d(Tensor(x), ConvSpec(shape[1], co, stride=stride, padding=padding), Tensor(w), Tensor(b))
        expected = naive_conv2d(x, w, b, stride, padding)
        assert out.shape == expected.shape
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_strided_output_shape(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(1, 2, 8, 8)))
        w = Tensor(rng.normal(size=(4, 2, 3, 3)))
        out = conv2d(x, ConvSpec(2, 4, stride=2), w, Tensor(np.zeros(4)))
        assert out.shape == (1, 4, 4, 4)

    def test_linearity_with_zero_bias(self):
        rng = np.random.default_rng(2)
        spec = ConvSpec(2, 3)
        w = Tensor(rng.normal(size=(3, 2, 3, 3)))
        b = Tensor(np.zeros(3))
        x, y = rng.normal(size=(1, 2, 6, 6)), rng.normal(size=(1, 2, 6, 6))
        a, c = 1.7, -0.3
        lhs = conv2d(Tensor(a * x + c * y), spec, w, b).data
        rhs = a * conv2d(Tensor(x), spec, w, b).data + c * conv2d(Tensor(y), spec, w, b).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)

    def test_channel_mismatch_names_dimension(self):
        x = Tensor(np.zeros((1, 3, 8, 8)))
        with pytest.raises(ValueError, match="channel"):
            conv2d(x, ConvSpec(2, 4), Tensor(np.zeros((4, 2, 3, 3))), Tensor(np.zeros(4)))

    def test_weight_shape_mismatch_rejected(self):
        x = Tensor(np.zeros((1, 2, 8, 8)))
        with pytest.raises(ValueError, match="weight shape"):
            conv2d(x, ConvSpec(2, 4), Tensor(np.zeros((4, 3, 3, 3))), Tensor(np.zeros(4)))

    def test_even_kernel_with_same_padding_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            ConvSpec(1, 1, kernel=(2, 2), padding="same")

    def test_gradients(self):
        rng = np.random.default_rng(3)
        x0 = rng.normal(size=(1, 2, 6, 6))
        w0 = rng.normal(size=(3, 2, 3, 3))
        b0 = rng.normal(size=3)
        for stride, padding in [(1, "same"), (2, "same"), (1, "valid")]:
            spec = ConvSpec(2, 3, stride=stride, padding=padding)
            err_x = finite_difference_check(
                lambda t: scalarize(conv2d(t, spec, Tensor(w0), Tensor(b0))), Tensor(x0))
            err_w = finite_difference_check(
                lambda t: scalarize(conv2d(Tensor(x0), spec, t, Tensor(b0))), Tensor(w0))
            err_b = finite_difference_check(
                lambda t: scalarize(conv2d(Tensor(x0), spec, Tensor(w0), t)), Tensor(b0))
            assert max(err_x, err_w, err_b) < FD_TOL


class TestTransposedConv2d:
    def test_disjoint_block_broadcast(self):
        spec = ConvSpec(1, 1, kernel=(2, 2), stride=2, padding="valid")
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        w = Tensor(np.ones((1, 1, 2, 2)))
        out = transposed_conv2d(Tensor(x), spec, w, Tensor(np.zeros(1)))
        assert out.shape == (1, 1, 4, 4)
        expected = np.kron(x[0, 0], np.ones((2, 2)))
        np.testing.assert_array_equal(out.data[0, 0], expected)

    def test_zero_input_doubles_dims(self):
        spec = ConvSpec(3, 2, stride=2)
        out = transposed_conv2d(
            Tensor(np.zeros((2, 3, 5, 7))), spec, Tensor(np.zeros((3, 2, 3, 3))), Tensor(np.zeros(2)))
        assert out.shape == (2, 2, 10, 14)
        assert np.all(out.data == 0)

    def test_matches_gradient_of_conv_oracle(self):
        # forward transposed conv == input-gradient pass of the strided conv
        rng = np.random.default_rng(7)
        w = rng.normal(size=(4, 2, 3, 3))
        conv_spec = ConvSpec(2, 4, stride=2)
        z = Tensor(rng.normal(size=(1, 2, 8, 8)), requires_grad=True)
        cotangent = rng.normal(size=(1, 4, 4, 4))
        out = conv2d(z, conv_spec, Tensor(w), Tensor(np.zeros(4)))
        out.backward(cotangent)
        tspec = ConvSpec(4, 2, stride=2)
        t_out = transposed_conv2d(Tensor(cotangent), tspec, Tensor(w), Tensor(np.zeros(2)))
        np.testing.assert_allclose(t_out.data, z.grad, atol=1e-12)

    def test_adjoint_identity(self):
        # <conv(x), y> == <x, conv_T(y)>
        rng = np.random.default_rng(8)
        w = rng.normal(size=(3, 2, 3, 3))
        x = rng.normal(size=(2, 2, 8, 6))
        y = rng.normal(size=(2, 3, 4, 3))
        cx = conv2d(Tensor(x), ConvSpec(2, 3, stride=2), Tensor(w), Tensor(np.zeros(3)))
        ty = transposed_conv2d(Tensor(y), ConvSpec(3, 2, stride=2), Tensor(w), Tensor(np.zeros(2)))
        lhs = float((cx.data * y).sum())
        rhs = float((x * ty.data).sum())
        assert abs(lhs - rhs) < 1e-10

    def test_gradients(self):
        rng = np.random.default_rng(9)
        spec = ConvSpec(2, 3, stride=2)
        x0 = rng.normal(size=(1, 2, 4, 4))
        w0 = rng.normal(size=(2, 3, 3, 3))
        b0 = rng.normal(size=3)
        err_x = finite_difference_check(
            lambda t: scalarize(transposed_conv2d(t, spec, Tensor(w0), Tensor(b0))), Tensor(x0))
        err_w = finite_difference_check(
            lambda t: scalarize(transposed_conv2d(Tensor(x0), spec, t, Tensor(b0))), Tensor(w0))
        err_b = finite_difference_check(
            lambda t: scalarize(transposed_conv2d(Tensor(x0), spec, Tensor(w0), t)), Tensor(b0))
        assert max(err_x, err_w, err_b) < FD_TOL


class TestActivations:
    def test_sigmoid_at_zero(self):
        assert sigmoid(Tensor(np.array(0.0))).data == 0.5

    def test_sigmoid_extreme_matches_high_precision(self):
        import mpmath

        mpmath.mp.dps = 300
        out = sigmoid(Tensor(np.array([500.0, -500.0])))
        assert np.all(np.isfinite(out.data))
        hi = float(1 / (1 + mpmath.exp(-500)))
        lo = float(1 / (1 + mpmath.exp(500)))
        assert out.data[0] == pytest.approx(hi, abs=1e-15)
        assert out.data[1] == pytest.approx(lo, rel=1e-12)
        assert out.data[1] > 0.0

    def test_sigmoid_strictly_inside_unit_interval(self):
        # strictness is only resolvable while 1 - sigmoid stays above eps
        x = np.linspace(-30, 30, 201)
        out = sigmoid(Tensor(x)).data
        assert np.all(out > 0) and np.all(out < 1)

    def test_softmax_equal_logits(self):
        x = Tensor(np.zeros((1, 2, 3, 3)))
        out = softmax_channels(x)
        np.testing.assert_array_equal(out.data, np.full((1, 2, 3, 3), 0.5))

    def test_softmax_sums_to_one(self):
        rng = np.random.default_rng(10)
        x = Tensor(rng.normal(scale=5, size=(2, 4, 5, 5)))
        out = softmax_channels(x)
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-12)

    def test_softmax_stable_for_huge_logits(self):
        x = Tensor(np.full((1, 2, 2, 2), 1000.0))
        out = softmax_channels(x)
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data, 0.5)

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=8))
    @settings(max_examples=50, deadline=None)
    def test_softmax_channel_sum_property(self, logits):
        x = Tensor(np.array(logits).reshape(1, -1, 1, 1))
        out = softmax_channels(x)
        assert abs(out.data.sum() - 1.0) < 1e-12

    def test_activation_gradients(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(2, 3, 4, 4))
        x = np.where(np.abs(x) < 0.1, x + 0.3, x)  # keep relu away from its kink
        for fn in (relu, sigmoid, softplus, softmax_channels, log_softmax_channels):
            err = finite_difference_check(lambda t, fn=fn: scalarize(fn(t)), Tensor(x))
            assert err < FD_TOL, fn.__name__


class TestConcat:
    def test_shape_arithmetic(self):
        a = Tensor(np.zeros((1, 2, 4, 4)))
        b = Tensor(np.zeros((1, 3, 4, 4)))
        assert concat_channels(a, b).shape == (1, 5, 4, 4)

    def test_concat_with_zeros_preserves_sum(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(2, 3, 4, 4))
        out = concat_channels(Tensor(x), Tensor(np.zeros((2, 2, 4, 4))))
        assert out.data.sum() == pytest.approx(x.sum())

    def test_backward_of_sum_is_all_ones(self):
        a = Tensor(np.random.default_rng(13).normal(size=(1, 2, 3, 3)), requires_grad=True)
        b = Tensor(np.random.default_rng(14).normal(size=(1, 4, 3, 3)), requires_grad=True)
        concat_channels(a, b).sum().backward()
        np.testing.assert_array_equal(a.grad, np.ones(a.shape))
        np.testing.assert_array_equal(b.grad, np.ones(b.shape))

    def test_spatial_mismatch_rejected(self):
        a = Tensor(np.zeros((1, 2, 4, 4)))
        b = Tensor(np.zeros((1, 2, 5, 4)))
        with pytest.raises(ValueError, match="height"):
            concat_channels(a, b)

    def test_gradients(self):
        rng = np.random.default_rng(15)
        x = rng.normal(size=(1, 2, 3, 3))
        other = Tensor(rng.normal(size=(1, 3, 3, 3)))
        err = finite_difference_check(lambda t: scalarize(concat_channels(t, other)), Tensor(x))
        assert err < FD_TOL

    def test_slice_channels_roundtrip_and_grad(self):
        rng = np.random.default_rng(16)
        x = rng.normal(size=(2, 4, 3, 3))
        out = slice_channels(Tensor(x), 1, 3)
        np.testing.assert_array_equal(out.data, x[:, 1:3])
        err = finite_difference_check(lambda t: scalarize(slice_channels(t, 1, 3)), Tensor(x))
        assert err < FD_TOL


class TestMaxPool:
    def test_forward(self):
        x = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
        out = max_pool2d(Tensor(x))
        np.testing.assert_array_equal(out.data[0, 0], [[5, 7], [13, 15]])

    def test_odd_dims_rejected(self):
        with pytest.raises(ValueError, match="even"):
            max_pool2d(Tensor(np.zeros((1, 1, 3, 4))))

    def test_gradients(self):
        rng = np.random.default_rng(17)
        # distinct values avoid argmax ties that break finite differences
        x = rng.permutation(64).astype(float).reshape(1, 2, 4, 8) * 0.37
        err = finite_difference_check(lambda t: scalarize(max_pool2d(t)), Tensor(x))
        assert err < FD_TOL


class TestFiniteDifferenceCheck:
    def test_quadratic(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, [2.0, 4.0])
        err = finite_difference_check(lambda t: (t * t).sum(), Tensor(np.array([1.0, 2.0])))
        assert err < 1e-8

    def test_bce_after_sigmoid(self):
        from hrfseg.losses import binary_cross_entropy

        rng = np.random.default_rng(18)
        z = rng.normal(size=(2, 1, 4, 4))
        y = (rng.random((2, 1, 4, 4)) > 0.7).astype(float)
        err = finite_difference_check(lambda t: binary_cross_entropy(t, y).value, Tensor(z))
        assert err < FD_TOL

    def test_dice_loss(self):
        from hrfseg.losses import dice_loss

        rng = np.random.default_rng(19)
        p = rng.random((2, 1, 4, 4)) * 0.8 + 0.1
        y = (rng.random((2, 1, 4, 4)) > 0.6).astype(float)
        err = finite_difference_check(lambda t: dice_loss(t, y).value, Tensor(p))
        assert err < FD_TOL

    def test_rejects_non_scalar(self):
        with pytest.raises(ValueError, match="scalar"):
            finite_difference_check(lambda t: t * 2.0, Tensor(np.ones(3)))


class TestGraphMechanics:
    def test_no_grad_skips_recording(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            out = (x * 2.0).sum()
        assert out._backward is None

    def test_grad_accumulates_across_backwards(self):
        x = Tensor(np.ones(3), requires_grad=True)
        (x * 2.0).sum().backward()
        (x * 2.0).sum().backward()
        np.testing.assert_array_equal(x.grad, np.full(3, 4.0))

    def test_diamond_graph_gradient(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        y = x * x + x * 2.0
        y.sum().backward()
        np.testing.assert_allclose(x.grad, [8.0])

    def test_float32_graph_stays_float32(self):
        x = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
        out = (x * 2.0 + 1.0).mean()
        assert out.dtype == np.float32
        out.backward()
        assert x.grad.dtype == np.float32
