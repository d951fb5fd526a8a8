import warnings

import numpy as np
import pytest
from conftest import layer_with
from oracles import conv2d_loops, si_conv_loops

from sdkit.core import (ConvLayer, Downsample, EmptyMaskWarning, ResidualBlock, Tensor,
                        Upsample, backward, conv2d, downsample2x, ops, pointwise_conv,
                        residual_block, si_conv2d, upsample2x)
from sdkit.core.gradcheck import check_gradients


def test_all_ones_center_is_nine():
    out = conv2d(np.ones((1, 3, 3)), layer_with(np.ones((1, 1, 3, 3))))
    assert out.data[0, 1, 1] == 9.0


def test_identity_kernel():
    x = np.random.default_rng(0).standard_normal((1, 5, 7))
    out = conv2d(x, layer_with(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_matches_nested_loops(stride, rng):
    x = rng.standard_normal((2, 4, 5)) if stride == 1 else rng.standard_normal((2, 6, 8))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    out = conv2d(x, layer_with(w, b, stride=stride))
    np.testing.assert_allclose(out.data, conv2d_loops(x, w, b, stride, 1), rtol=0, atol=1e-12)


def test_conv_batched_equals_per_image(rng):
    x = rng.standard_normal((3, 2, 8, 8))
    layer = ConvLayer(2, 4, 3, rng=rng)
    out = conv2d(x, layer).data
    for i in range(3):
        np.testing.assert_array_equal(out[i], conv2d(x[i], layer).data)


def test_conv_shape_error_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(1, 4, 4\).*\(2, 3, 3, 3\)"):
        conv2d(np.ones((1, 4, 4)), ConvLayer(3, 2, 3))


def test_even_kernel_rejected():
    with pytest.raises(ValueError):
        ConvLayer(1, 1, 2)


def test_pointwise_mean_and_selector(rng):
    x = rng.standard_normal((2, 4, 4))
    mean = pointwise_conv(x, layer_with(np.array([0.5, 0.5]).reshape(1, 2, 1, 1)))
    np.testing.assert_allclose(mean.data[0], x.mean(axis=0), atol=1e-15)
    sel = pointwise_conv(x, layer_with(np.array([1.0, 0.0]).reshape(1, 2, 1, 1)))
    np.testing.assert_array_equal(sel.data[0], x[0])
    with pytest.raises(ValueError):
        pointwise_conv(x, ConvLayer(2, 1, 3))


def test_pointwise_matches_per_pixel_matmul(rng):
    x = rng.standard_normal((5, 6, 7))
    w = rng.standard_normal((3, 5, 1, 1))
    b = rng.standard_normal(3)
    out = pointwise_conv(x, layer_with(w, b)).data
    ref = np.einsum("oc,chw->ohw", w[:, :, 0, 0], x) + b[:, None, None]
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_si_conv_single_valid_pixel():
    x = np.zeros((1, 3, 3))
    x[0, 1, 1] = 5.0
    m = np.zeros((3, 3))
    m[1, 1] = 1
    out, out_m = si_conv2d(x, m, layer_with(np.ones((1, 1, 3, 3))))
    assert out.data[0, 1, 1] == pytest.approx(5.0 / (1 + 1e-8), rel=1e-15)
    assert out_m.min() == 1.0


def test_si_conv_all_valid_equals_count_normalised_conv(rng):
    x = rng.standard_normal((1, 6, 6))
    layer = layer_with(np.ones((1, 1, 3, 3)))
    out, _ = si_conv2d(x, np.ones((6, 6)), layer, eps=0.0)
    counts = conv2d(np.ones((1, 6, 6)), layer).data
    np.testing.assert_allclose(out.data, conv2d(x, layer).data / counts, atol=1e-12)
    # interior pixels see the full window: conv / k^2
    np.testing.assert_allclose(out.data[:, 1:-1, 1:-1], conv2d(x, layer).data[:, 1:-1, 1:-1] / 9,
                               atol=1e-12)


def test_si_conv_matches_loop_oracle(rng):
    x = rng.standard_normal((2, 6, 7))
    m = (rng.random((6, 7)) < 0.3).astype(float)
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    out, out_m = si_conv2d(x, m, layer_with(w, b), eps=1e-8)
    ref, ref_m = si_conv_loops(x, m, w, b, 1, 1e-8)
    np.testing.assert_allclose(out.data, ref, atol=1e-12)
    np.testing.assert_array_equal(out_m, ref_m)


def test_si_conv_mask_density_grows_over_layers(rng):
    m = (rng.random((64, 64)) < 0.04).astype(float)
    x = rng.standard_normal((1, 64, 64))
    layer = ConvLayer(1, 1, 3, rng=rng)
    density = m.mean()
    for _ in range(4):
        x, m_next = si_conv2d(x, m, layer)
        assert m_next.mean() >= density and np.all(m_next >= m)
        density, m = m_next.mean(), m_next


def test_si_conv_invalid_pixels_get_zero_gradient(rng):
    x = Tensor(rng.standard_normal((1, 2, 8, 8)), requires_grad=True)
    m = (rng.random((8, 8)) < 0.3).astype(float)
    out, _ = si_conv2d(x, m, ConvLayer(2, 3, 3, rng=rng))
    backward(ops.sum(ops.mul(out, out)))
    assert np.all(x.grad[:, :, m == 0] == 0)
    assert np.any(x.grad[:, :, m == 1] != 0)


def test_si_conv_empty_mask_warns_and_returns_bias():
    layer = ConvLayer(1, 2, 3)
    layer.bias.data[:] = [1.0, -2.0]
    with pytest.warns(EmptyMaskWarning):
        out, m = si_conv2d(np.ones((1, 4, 4)), np.zeros((4, 4)), layer)
    np.testing.assert_array_equal(out.data[0], 1.0)
    np.testing.assert_array_equal(out.data[1], -2.0)
    assert m.sum() == 0


def test_si_conv_mask_size_mismatch():
    with pytest.raises(ValueError, match="mask"):
        si_conv2d(np.ones((1, 4, 4)), np.ones((4, 5)), ConvLayer(1, 1, 3))


def test_residual_zero_weights_is_identity(rng):
    block = ResidualBlock(3, rng=rng)
    for p in block.parameters():
        p.data[:] = 0
    x = Tensor(rng.standard_normal((3, 5, 5)), requires_grad=True)
    out = residual_block(x, block)
    np.testing.assert_array_equal(out.data, x.data)
    seed = rng.standard_normal(x.shape)
    backward(out, seed)
    np.testing.assert_array_equal(x.grad, seed)


def test_residual_matches_composition(rng):
    block = ResidualBlock(2, rng=rng)
    for p in block.parameters():
        p.data[:] = rng.standard_normal(p.shape)
    x = rng.standard_normal((2, 6, 6))
    c1, c2 = block.conv1, block.conv2
    ref = x + conv2d_loops(np.maximum(conv2d_loops(x, c1.weight.data, c1.bias.data, 1, 1), 0),
                           c2.weight.data, c2.bias.data, 1, 1)
    np.testing.assert_allclose(residual_block(x, block).data, ref, atol=1e-12)


def test_residual_channel_mismatch():
    with pytest.raises(ValueError):
        residual_block(np.ones((2, 4, 4)), ResidualBlock(3))


def test_down_up_constancy_and_shapes(rng):
    down = Downsample(1, 1)
    down.conv.weight.data[:] = 1.0 / 9
    out = downsample2x(np.full((1, 4, 4), 2.5), down)
    assert out.shape == (1, 2, 2)
    np.testing.assert_allclose(out.data, 2.5, atol=1e-15)
    x = rng.standard_normal((1, 2, 8, 16))
    d = downsample2x(x, Downsample(2, 3, rng=rng))
    assert d.shape == (1, 3, 4, 8)
    assert upsample2x(d, Upsample(3, 2, rng=rng)).shape == (1, 2, 8, 16)


def test_down_up_shape_contract_random_sizes(rng):
    down, up = Downsample(1, 2, rng=rng), Upsample(2, 1, rng=rng)
    for _ in range(5):
        h, w = 2 * rng.integers(1, 12, size=2)
        x = rng.standard_normal((1, int(h), int(w)))
        assert upsample2x(downsample2x(x, down), up).shape == x.shape


def test_downsample_rejects_odd():
    with pytest.raises(ValueError, match="even"):
        downsample2x(np.ones((1, 5, 4)), Downsample(1, 1))


@pytest.mark.parametrize("pad_mode,stride", [("zeros", 1), ("zeros", 2), ("edge", 1), ("edge", 2)])
def test_conv_gradients(pad_mode, stride, rng):
    def fn(x, w, b):
        return ops.conv2d_raw(x, w, b, stride=stride, padding=1, pad_mode=pad_mode)
    arrays = [rng.standard_normal((2, 2, 6, 6)), rng.standard_normal((3, 2, 3, 3)),
              rng.standard_normal(3)]
    assert check_gradients(fn, arrays, rng) < 1e-6


def test_conv_forward_is_pure(rng):
    x = rng.standard_normal((1, 3, 16, 16))
    layer = ConvLayer(3, 4, 3, rng=rng)
    with warnings.catch_warnings():
        np.testing.assert_array_equal(conv2d(x, layer).data, conv2d(x, layer).data)


def test_float32_forward_within_train_tolerance(rng):
    x = rng.standard_normal((4, 9, 11))
    w = rng.standard_normal((3, 4, 3, 3))
    b = rng.standard_normal(3)
    out = conv2d(x.astype(np.float32), layer_with(w.astype(np.float32), b.astype(np.float32)))
    assert out.dtype == np.float32
    np.testing.assert_allclose(out.data, conv2d_loops(x, w, b, 1, 1), rtol=0, atol=1e-4)
