"""Area attention: tiling, gate properties, and fast-vs-naive agreement."""

import numpy as np
import pytest

from reslink.attention import (AreaAttentionParams, area_attention,
                               area_attention_backward,
                               area_attention_forward,
                               area_attention_reference, area_merge,
                               area_partition, mid_channels)
from reslink.errors import DimensionError
from reslink.layers import INFER, TRAIN


def _params(channels, area_h, area_w, seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    return AreaAttentionParams.create(channels, area_h, area_w, rng,
                                      dtype=dtype)


# ---------------------------------------------------------------------------
# tiling


@pytest.mark.parametrize("c,expected", [(1, 1), (4, 1), (8, 1), (16, 2),
                                        (64, 8), (9, 1)])
def test_mid_channels(c, expected):
    assert mid_channels(c) == expected


def test_partition_exact_grid_round_trip():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 8, 12, 3))
    tiles, (h, w) = area_partition(x, 4, 4)
    assert tiles.shape == (2, 2, 3, 4, 4, 3)
    assert (h, w) == (8, 12)
    np.testing.assert_array_equal(area_merge(tiles), x)


def test_partition_ragged_pads_with_zeros():
    x = np.ones((1, 5, 7, 2))
    tiles, _ = area_partition(x, 3, 3)
    assert tiles.shape == (1, 2, 3, 3, 3, 2)
    merged = area_merge(tiles)
    assert merged.shape == (1, 6, 9, 2)
    np.testing.assert_array_equal(merged[:, :5, :7], x)
    assert (merged[:, 5:, :] == 0).all()
    assert (merged[:, :, 7:] == 0).all()


def test_partition_tile_contents():
    x = np.arange(16, dtype=np.float64).reshape(1, 4, 4, 1)
    tiles, _ = area_partition(x, 2, 2)
    np.testing.assert_array_equal(tiles[0, 1, 0, :, :, 0],
                                  [[8.0, 9.0], [12.0, 13.0]])


def test_partition_validation():
    with pytest.raises(DimensionError):
        area_partition(np.zeros((4, 4, 1)), 2, 2)
    with pytest.raises(DimensionError):
        area_partition(np.zeros((1, 4, 4, 1)), 0, 2)
    with pytest.raises(DimensionError):
        area_merge(np.zeros((1, 2, 2, 2, 2)))


# ---------------------------------------------------------------------------
# gate behaviour


def test_alpha_one_scalar_per_tile_in_unit_interval():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 8, 8, 4))
    out, alpha = area_attention(x, _params(4, 4, 4, seed=1), TRAIN)
    assert alpha.shape == (3, 2, 2)
    assert ((alpha > 0) & (alpha < 1)).all()
    assert out.shape == x.shape


def test_gating_rescales_each_tile_by_its_alpha():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 6, 6, 4))
    out, alpha = area_attention(x, _params(4, 3, 3, seed=2), TRAIN)
    for s in range(2):
        for gi in range(2):
            for gj in range(2):
                tile = x[s, gi * 3:(gi + 1) * 3, gj * 3:(gj + 1) * 3]
                got = out[s, gi * 3:(gi + 1) * 3, gj * 3:(gj + 1) * 3]
                np.testing.assert_allclose(got, tile * alpha[s, gi, gj],
                                           rtol=1e-12)


def test_output_cropped_to_input_extent_when_ragged():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 7, 5, 8))
    out, alpha = area_attention(x, _params(8, 4, 4, seed=3), TRAIN)
    assert out.shape == x.shape
    assert alpha.shape == (1, 2, 2)


def test_bn_statistics_shared_across_all_tiles():
    # One TRAIN forward must advance the running stats exactly once, and the
    # naive per-area path must normalise over the same element set.  The two
    # conv implementations round differently (BLAS uses fused multiply-add),
    # so agreement is to a few ULPs, not bitwise.
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 8, 8, 4))
    fast, naive = _params(4, 4, 4, seed=4), _params(4, 4, 4, seed=4)
    out_fast, alpha_fast = area_attention(x, fast, TRAIN)
    out_naive, alpha_naive = area_attention_reference(x, naive, TRAIN)
    np.testing.assert_allclose(fast.bn.running_mean, naive.bn.running_mean,
                               rtol=1e-12)
    np.testing.assert_allclose(fast.bn.running_var, naive.bn.running_var,
                               rtol=1e-12)
    np.testing.assert_allclose(alpha_fast, alpha_naive, atol=1e-12)
    np.testing.assert_allclose(out_fast, out_naive, atol=1e-12)


def test_infer_mode_consumes_running_stats():
    rng = np.random.default_rng(5)
    params = _params(4, 2, 2, seed=5)
    x = rng.normal(size=(1, 4, 4, 4))
    area_attention(x, params, TRAIN)  # move the stats off their init values
    before = (params.bn.running_mean.copy(), params.bn.running_var.copy())
    out1, _ = area_attention(x, params, INFER)
    out2, _ = area_attention(x, params, INFER)
    np.testing.assert_array_equal(out1, out2)
    np.testing.assert_array_equal(params.bn.running_mean, before[0])
    np.testing.assert_array_equal(params.bn.running_var, before[1])


def test_channel_mismatch_rejected():
    with pytest.raises(DimensionError):
        area_attention(np.zeros((1, 4, 4, 3)), _params(4, 2, 2), TRAIN)


# ---------------------------------------------------------------------------
# fast path vs naive reference


@pytest.mark.parametrize("h,w,a,b,c", [
    (8, 8, 4, 4, 4),
    (7, 7, 4, 4, 8),      # ragged both axes
    (14, 16, 7, 4, 4),    # ragged rows only
    (16, 7, 1, 7, 1),     # degenerate 1-row areas
    (8, 14, 4, 7, 8),
])
@pytest.mark.parametrize("mode", [TRAIN, INFER])
def test_reference_agreement_f64(h, w, a, b, c, mode):
    rng = np.random.default_rng(h * 100 + w)
    x = rng.uniform(-1, 1, (2, h, w, c))
    got, _ = area_attention(x, _params(c, a, b, seed=h + w), mode)
    want, _ = area_attention_reference(x, _params(c, a, b, seed=h + w), mode)
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_reference_agreement_f32():
    rng = np.random.default_rng(6)
    params = _params(8, 7, 7, seed=6, dtype=np.float32)
    ref_params = _params(8, 7, 7, seed=6, dtype=np.float32)
    x = rng.uniform(-1, 1, (2, 14, 16, 8)).astype(np.float32)
    got, _ = area_attention(x, params, TRAIN)
    want, _ = area_attention_reference(x, ref_params, TRAIN)
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-6)


# ---------------------------------------------------------------------------
# backward plumbing (full gradient correctness lives in the FD suite)


def test_backward_returns_full_gradient_set():
    rng = np.random.default_rng(7)
    params = _params(4, 3, 3, seed=7)
    x = rng.normal(size=(2, 5, 7, 4))
    out, _, cache = area_attention_forward(x, params, TRAIN)
    grads = area_attention_backward(cache, rng.normal(size=out.shape))
    assert grads.feature.shape == x.shape
    assert grads.w1.shape == params.w1.shape
    assert grads.w2.shape == params.w2.shape
    assert grads.gamma.shape == params.bn.gamma.shape
    assert grads.beta.shape == params.bn.beta.shape


def test_backward_gate_grad_flag_changes_feature_grad():
    rng = np.random.default_rng(8)
    params = _params(4, 2, 2, seed=8)
    x = rng.normal(size=(1, 4, 4, 4))
    out, _, cache = area_attention_forward(x, params, TRAIN)
    up = rng.normal(size=out.shape)
    with_gate = area_attention_backward(cache, up, gate_grad=True)
    frozen = area_attention_backward(cache, up, gate_grad=False)
    # Freezing the gate drops the alpha-dependency term from d/d feature
    # and zeroes the parameter gradients entirely.
    assert np.abs(with_gate.feature - frozen.feature).max() > 0
    np.testing.assert_array_equal(frozen.w1, 0.0)
    np.testing.assert_array_equal(frozen.w2, 0.0)
