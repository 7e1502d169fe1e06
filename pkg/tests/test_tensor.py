"""Convolution, pooling and padding kernels against brute-force references."""

import numpy as np
import pytest

from reslink.errors import DimensionError
from reslink.tensor import (SAME, VALID, ConvSpec, conv2d, conv2d_backward,
                            conv2d_reference, conv_output_extent, matmul,
                            maxpool2d, maxpool2d_backward, pad2d,
                            same_pad_amounts)

from oracles import conv2d_oracle, matmul_oracle, maxpool_oracle


# ---------------------------------------------------------------------------
# geometry helpers


def test_output_extent_same_is_ceil():
    assert conv_output_extent(224, 7, 2, SAME) == 112
    assert conv_output_extent(7, 3, 2, SAME) == 4
    assert conv_output_extent(5, 3, 1, SAME) == 5


def test_output_extent_valid():
    assert conv_output_extent(5, 3, 1, VALID) == 3
    assert conv_output_extent(7, 3, 2, VALID) == 3
    with pytest.raises(DimensionError):
        conv_output_extent(2, 3, 1, VALID)


def test_same_pad_smaller_amount_first():
    # Total padding of 1 must land after (bottom/right), not before.
    assert same_pad_amounts(6, 3, 2) == (0, 1)
    assert same_pad_amounts(5, 3, 1) == (1, 1)
    assert same_pad_amounts(4, 1, 1) == (0, 0)
    # 7x7 stride-2 over 224: total pad 5 -> (2, 3).
    assert same_pad_amounts(224, 7, 2) == (2, 3)


def test_pad2d_values_and_fill():
    x = np.arange(4, dtype=np.float32).reshape(1, 2, 2, 1)
    out = pad2d(x, 1, 0, 0, 2, fill=-1.0)
    assert out.shape == (1, 3, 4, 1)
    assert out[0, 0, 0, 0] == -1.0
    assert out[0, 1, 0, 0] == x[0, 0, 0, 0]
    assert (out[0, :, 2:, 0] == -1.0).all()


def test_pad2d_rejects_negative_amounts():
    x = np.zeros((1, 2, 2, 1))
    with pytest.raises(DimensionError):
        pad2d(x, -1, 0, 0, 0)


# ---------------------------------------------------------------------------
# matmul


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(4, 6))
    b = rng.normal(size=(6, 3))
    np.testing.assert_allclose(matmul(a, b), matmul_oracle(a, b),
                               rtol=1e-12, atol=1e-12)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(np.zeros((2, 3)), np.zeros((4, 2)))


# ---------------------------------------------------------------------------
# conv2d


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("shape,kshape,stride,padding", [
    ((2, 5, 5, 3), (3, 3, 3, 4), 1, SAME),
    ((2, 6, 5, 2), (3, 3, 2, 3), 2, SAME),
    ((1, 7, 7, 1), (7, 7, 1, 8), 2, SAME),
    ((2, 6, 6, 3), (3, 3, 3, 2), 1, VALID),
    ((1, 8, 7, 2), (3, 2, 2, 2), 2, VALID),
    ((2, 4, 4, 3), (1, 1, 3, 5), 1, SAME),
])
def test_conv2d_matches_loop_oracle(shape, kshape, stride, padding, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=shape)
    k = rng.normal(size=kshape)
    got = conv2d(x, k, ConvSpec(kshape[0], kshape[1], stride, padding))
    want = conv2d_oracle(x, k, stride=stride, same=(padding == SAME))
    assert got.shape == want.shape
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_conv2d_agrees_with_naive_reference():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(2, 9, 8, 4)).astype(np.float32)
    k = rng.normal(size=(3, 3, 4, 6)).astype(np.float32)
    spec = ConvSpec(3, 3, 2, SAME)
    np.testing.assert_allclose(conv2d(x, k, spec), conv2d_reference(x, k, spec),
                               rtol=0, atol=1e-5)


def test_conv2d_preserves_dtype():
    x = np.zeros((1, 4, 4, 2), dtype=np.float32)
    k = np.zeros((3, 3, 2, 1), dtype=np.float32)
    assert conv2d(x, k, ConvSpec(3, 3)).dtype == np.float32


def test_conv2d_rejects_channel_mismatch():
    x = np.zeros((1, 4, 4, 2))
    k = np.zeros((3, 3, 3, 1))
    with pytest.raises(DimensionError):
        conv2d(x, k, ConvSpec(3, 3))


def test_conv2d_rejects_wrong_rank():
    with pytest.raises(DimensionError):
        conv2d(np.zeros((4, 4, 2)), np.zeros((3, 3, 2, 1)), ConvSpec(3, 3))


def test_convspec_validation():
    with pytest.raises(DimensionError):
        ConvSpec(0, 3)
    with pytest.raises(DimensionError):
        ConvSpec(3, 3, 0)
    with pytest.raises(DimensionError):
        ConvSpec(3, 3, 1, "full")


@pytest.mark.parametrize("stride,padding", [(1, SAME), (2, SAME), (1, VALID)])
def test_conv2d_backward_matches_finite_differences(stride, padding):
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 5, 6, 2))
    k = rng.normal(size=(3, 3, 2, 3))
    spec = ConvSpec(3, 3, stride, padding)
    up = rng.normal(size=conv2d(x, k, spec).shape)
    dx, dk = conv2d_backward(x, k, spec, up)
    assert dx.shape == x.shape and dk.shape == k.shape

    h = 1e-6
    for target, grad in ((x, dx), (k, dk)):
        flat = target.reshape(-1)
        for idx in rng.choice(flat.size, size=8, replace=False):
            orig = flat[idx]
            flat[idx] = orig + h
            hi = float(np.sum(conv2d(x, k, spec) * up))
            flat[idx] = orig - h
            lo = float(np.sum(conv2d(x, k, spec) * up))
            flat[idx] = orig
            np.testing.assert_allclose(grad.reshape(-1)[idx], (hi - lo) / (2 * h),
                                       rtol=1e-5, atol=1e-8)


# ---------------------------------------------------------------------------
# maxpool2d


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("shape,pool,stride,padding", [
    ((2, 6, 6, 3), (3, 3), 2, SAME),
    ((1, 7, 5, 2), (3, 3), 2, SAME),
    ((2, 4, 4, 1), (2, 2), 2, VALID),
    ((1, 5, 5, 2), (2, 3), 1, SAME),
])
def test_maxpool_matches_loop_oracle(shape, pool, stride, padding, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=shape)
    out, argmax = maxpool2d(x, pool[0], pool[1], stride, padding)
    want = maxpool_oracle(x, pool[0], pool[1], stride, same=(padding == SAME))
    assert argmax.shape == out.shape
    np.testing.assert_allclose(out, want, rtol=0, atol=0)


def test_maxpool_padding_never_wins():
    # All-negative input: a zero-padded SAME border must not leak zeros in.
    x = -np.abs(np.random.default_rng(5).normal(size=(1, 5, 5, 1))) - 1.0
    out, _ = maxpool2d(x, 3, 3, 2, SAME)
    assert (out < 0).all()


def test_maxpool_backward_routes_to_winner():
    x = np.array([[1.0, 2.0], [4.0, 3.0]]).reshape(1, 2, 2, 1)
    out, argmax = maxpool2d(x, 2, 2, 2, VALID)
    assert out[0, 0, 0, 0] == 4.0
    dx = maxpool2d_backward(x, 2, 2, 2, VALID, argmax, np.ones((1, 1, 1, 1)))
    np.testing.assert_array_equal(
        dx[0, :, :, 0], np.array([[0.0, 0.0], [1.0, 0.0]]))


def test_maxpool_backward_accumulates_overlaps():
    # Stride 1 windows overlap; a shared winner collects every window's grad.
    x = np.array([[0.0, 0.0, 0.0], [0.0, 9.0, 0.0], [0.0, 0.0, 0.0]])
    x = x.reshape(1, 3, 3, 1)
    out, argmax = maxpool2d(x, 2, 2, 1, VALID)
    assert (out == 9.0).all()
    dx = maxpool2d_backward(x, 2, 2, 1, VALID, argmax, np.ones((1, 2, 2, 1)))
    assert dx[0, 1, 1, 0] == 4.0
    assert dx.sum() == 4.0


def test_maxpool_backward_shape_checks():
    x = np.zeros((1, 4, 4, 1))
    _, argmax = maxpool2d(x, 2, 2, 2, VALID)
    with pytest.raises(DimensionError):
        maxpool2d_backward(x, 2, 2, 2, VALID, argmax, np.zeros((1, 3, 3, 1)))
