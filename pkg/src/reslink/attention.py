"""Area attention: per-area scalar gates over non-overlapping spatial tiles.

A feature map is partitioned into non-overlapping area_h x area_w tiles
(zero-padded at ragged bottom/right edges).  Each tile is squeezed through a
1x1 convolution to c_mid = max(c // 8, 1) channels, batch-normalised (the
statistics are shared across every tile in the batch), expanded by a 3x3
SAME convolution to a single channel, and averaged over the tile's *valid*
pixels — padding never enters the mean denominator.  The sigmoid of that
scalar gates every pixel of the tile multiplicatively; the output is cropped
back to the input extent, so shape is always preserved.

``area_attention`` is the fast batched path (all tiles processed as one
batch).  ``area_attention_reference`` recomputes the same semantics area by
area with the nested-loop convolution oracle; the two must agree to 1e-6 and
tests hold them to that.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .layers import BatchNormState, batchnorm_forward, batchnorm_backward, sigmoid
from .tensor import ConvSpec, SAME, conv2d, conv2d_backward, conv2d_reference, pad2d

_SPEC_1X1 = ConvSpec(1, 1, 1, SAME)
_SPEC_3X3 = ConvSpec(3, 3, 1, SAME)


def mid_channels(channels: int) -> int:
    """Channel count of the squeezed gate representation."""
    return max(channels // 8, 1)


@dataclass
class AreaAttentionParams:
    """Gate parameters: squeeze conv, shared batchnorm, expand conv."""

    w1: np.ndarray  # [1, 1, c, c_mid]
    bn: BatchNormState
    w2: np.ndarray  # [3, 3, c_mid, 1]
    area_h: int
    area_w: int

    @classmethod
    def create(cls, channels: int, area_h: int, area_w: int,
               rng: np.random.Generator, dtype=np.float32) -> "AreaAttentionParams":
        if area_h < 1 or area_w < 1:
            raise DimensionError(f"area extents must be >= 1, got {area_h}x{area_w}")
        cm = mid_channels(channels)
        w1 = rng.normal(0.0, np.sqrt(2.0 / channels), (1, 1, channels, cm))
        w2 = rng.normal(0.0, np.sqrt(2.0 / (9 * cm)), (3, 3, cm, 1))
        return cls(
            w1=w1.astype(dtype),
            bn=BatchNormState.create(cm, dtype=dtype),
            w2=w2.astype(dtype),
            area_h=area_h,
            area_w=area_w,
        )


def area_partition(feature: np.ndarray, area_h: int,
                   area_w: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Tile an NHWC map into [n, gh, gw, area_h, area_w, c] (zero-padded).

    The returned pad record is the original (h, w), enough to crop any
    merged result back to the source extent.
    """
    if feature.ndim != 4:
        raise DimensionError(f"area_partition expects rank-4 input, got {feature.shape}")
    if area_h < 1 or area_w < 1:
        raise DimensionError(f"area extents must be >= 1, got {area_h}x{area_w}")
    n, h, w, c = feature.shape
    gh = -(-h // area_h)
    gw = -(-w // area_w)
    xp = feature
    if gh * area_h != h or gw * area_w != w:
        xp = pad2d(feature, 0, gh * area_h - h, 0, gw * area_w - w, 0.0)
    tiles = xp.reshape(n, gh, area_h, gw, area_w, c).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(tiles), (h, w)


def area_merge(tiles: np.ndarray) -> np.ndarray:
    """Inverse of area_partition (up to the zero padding, which stays)."""
    if tiles.ndim != 6:
        raise DimensionError(f"area_merge expects rank-6 tiles, got {tiles.shape}")
    n, gh, gw, a, b, c = tiles.shape
    return np.ascontiguousarray(
        tiles.transpose(0, 1, 3, 2, 4, 5).reshape(n, gh * a, gw * b, c))


def _valid_mask(gh: int, gw: int, a: int, b: int, h: int, w: int,
                dtype) -> np.ndarray:
    """[gh, gw, a, b] indicator of pixels that fall inside the real map."""
    rows = (np.arange(gh)[:, None] * a + np.arange(a)[None, :]) < h
    cols = (np.arange(gw)[:, None] * b + np.arange(b)[None, :]) < w
    return (rows[:, None, :, None] & cols[None, :, None, :]).astype(dtype)


@dataclass
class _AttentionCache:
    in_shape: tuple
    flat: np.ndarray      # [M, a, b, c] tiles as a batch
    u2: np.ndarray        # post-batchnorm squeeze activations
    bn_cache: tuple
    mask: np.ndarray      # [gh, gw, a, b]
    counts: np.ndarray    # [gh, gw]
    alpha: np.ndarray     # [n, gh, gw]
    params: AreaAttentionParams
    grid: tuple


@dataclass
class AreaAttentionGrads:
    feature: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray


def area_attention_forward(feature: np.ndarray, params: AreaAttentionParams,
                           mode: str) -> tuple[np.ndarray, np.ndarray, _AttentionCache]:
    """Fast path; returns (gated feature, alpha, backward cache)."""
    if feature.ndim != 4:
        raise DimensionError(f"area_attention expects rank-4 input, got {feature.shape}")
    if feature.shape[3] != params.w1.shape[2]:
        raise DimensionError(
            f"area_attention channel mismatch: input {feature.shape} "
            f"vs w1 {params.w1.shape}"
        )
    n, h, w, c = feature.shape
    a, b = params.area_h, params.area_w
    tiles, _ = area_partition(feature, a, b)
    gh, gw = tiles.shape[1], tiles.shape[2]
    flat = tiles.reshape(n * gh * gw, a, b, c)

    u1 = conv2d(flat, params.w1, _SPEC_1X1)
    u2, bn_cache = batchnorm_forward(u1, params.bn, mode)
    v = conv2d(u2, params.w2, _SPEC_3X3)  # [M, a, b, 1]

    mask = _valid_mask(gh, gw, a, b, h, w, feature.dtype)
    counts = mask.sum(axis=(2, 3))
    vm = v.reshape(n, gh, gw, a, b)
    g = (vm * mask).sum(axis=(3, 4)) / counts
    alpha = sigmoid(g)

    gated = tiles * alpha[:, :, :, None, None, None]
    out = area_merge(gated)[:, :h, :w, :]
    cache = _AttentionCache(
        in_shape=feature.shape, flat=flat, u2=u2, bn_cache=bn_cache,
        mask=mask, counts=counts, alpha=alpha, params=params, grid=(gh, gw),
    )
    return out, alpha, cache


def area_attention(feature: np.ndarray, params: AreaAttentionParams,
                   mode: str) -> tuple[np.ndarray, np.ndarray]:
    """Public forward: (gated feature map, per-area gate values)."""
    out, alpha, _ = area_attention_forward(feature, params, mode)
    return out, alpha


def area_attention_backward(cache: _AttentionCache, grad_out: np.ndarray,
                            gate_grad: bool = True) -> AreaAttentionGrads:
    """Backprop through the gate, including the alpha dependency on the input.

    With ``gate_grad=False`` the gate is treated as a constant (stop
    gradient): the feature gradient is exactly upstream * alpha and the gate
    parameters receive zero.  That variant exists for tests.
    """
    n, h, w, c = cache.in_shape
    a, b = cache.params.area_h, cache.params.area_w
    gh, gw = cache.grid
    if grad_out.shape != cache.in_shape:
        raise DimensionError(
            f"area_attention upstream {grad_out.shape} does not match input "
            f"{cache.in_shape}"
        )
    up_tiles, _ = area_partition(grad_out, a, b)  # zero pads ragged edges
    alpha_b = cache.alpha[:, :, :, None, None, None]

    # Direct branch: d(tile * alpha)/d(tile) with alpha frozen.
    d_tiles = up_tiles * alpha_b
    params = cache.params
    if not gate_grad:
        d_feature = area_merge(d_tiles)[:, :h, :w, :]
        return AreaAttentionGrads(
            feature=np.ascontiguousarray(d_feature),
            w1=np.zeros_like(params.w1), w2=np.zeros_like(params.w2),
            gamma=np.zeros_like(params.bn.gamma),
            beta=np.zeros_like(params.bn.beta),
        )

    # Gate branch: product rule through alpha = sigmoid(mean(v)).
    tiles = cache.flat.reshape(n, gh, gw, a, b, c)
    d_alpha = (up_tiles * tiles).sum(axis=(3, 4, 5))
    d_g = d_alpha * cache.alpha * (1.0 - cache.alpha)
    d_v = (d_g / cache.counts)[:, :, :, None, None] * cache.mask
    d_v = d_v.reshape(n * gh * gw, a, b, 1).astype(grad_out.dtype, copy=False)

    d_u2, d_w2 = conv2d_backward(cache.u2, params.w2, _SPEC_3X3, d_v)
    d_u1, d_gamma, d_beta = batchnorm_backward(cache.bn_cache, d_u2)
    d_flat, d_w1 = conv2d_backward(cache.flat, params.w1, _SPEC_1X1, d_u1)

    d_tiles += d_flat.reshape(n, gh, gw, a, b, c)
    d_feature = area_merge(d_tiles)[:, :h, :w, :]
    return AreaAttentionGrads(
        feature=np.ascontiguousarray(d_feature),
        w1=d_w1, w2=d_w2, gamma=d_gamma, beta=d_beta,
    )


def area_attention_reference(feature: np.ndarray, params: AreaAttentionParams,
                             mode: str) -> tuple[np.ndarray, np.ndarray]:
    """Slow per-area oracle with isolated nested-loop convolutions.

    Processes one area at a time; the only cross-area coupling is the shared
    batchnorm statistics, which are computed in a first pass over every
    area's squeeze output (exactly the element set the fast path normalises
    over).  Running statistics are updated the same way as the fast path.
    """
    n, h, w, c = feature.shape
    a, b = params.area_h, params.area_w
    gh = -(-h // a)
    gw = -(-w // b)
    fp = pad2d(feature, 0, gh * a - h, 0, gw * b - w, 0.0)
    cm = params.w1.shape[3]

    # Pass 1: squeeze conv per area, stacked in (n, i, j) order.
    u_all = np.zeros((n * gh * gw, a, b, cm), dtype=feature.dtype)
    m = 0
    for bi in range(n):
        for i in range(gh):
            for j in range(gw):
                tile = fp[bi, i * a:(i + 1) * a, j * b:(j + 1) * b, :][None]
                u_all[m] = conv2d_reference(tile, params.w1, _SPEC_1X1)[0]
                m += 1

    # Shared batch normalisation over every area.
    bn = params.bn
    if mode == "train":
        mean = u_all.mean(axis=(0, 1, 2))
        var = u_all.var(axis=(0, 1, 2))
        mom = bn.momentum
        bn.running_mean[...] = mom * bn.running_mean + (1.0 - mom) * mean
        bn.running_var[...] = mom * bn.running_var + (1.0 - mom) * var
    else:
        mean = bn.running_mean
        var = bn.running_var
    u_norm = bn.gamma * ((u_all - mean) / np.sqrt(var + bn.epsilon)) + bn.beta

    # Pass 2: expand conv and valid-pixel mean, area by area.
    out = np.zeros_like(feature)
    alpha = np.zeros((n, gh, gw), dtype=feature.dtype)
    m = 0
    for bi in range(n):
        for i in range(gh):
            for j in range(gw):
                v = conv2d_reference(u_norm[m][None], params.w2, _SPEC_3X3)[0]
                vh = min(a, h - i * a)
                vw = min(b, w - j * b)
                g = v[:vh, :vw, 0].mean()
                al = 1.0 / (1.0 + np.exp(-float(g)))
                alpha[bi, i, j] = al
                region = feature[bi, i * a:i * a + vh, j * b:j * b + vw, :]
                out[bi, i * a:i * a + vh, j * b:j * b + vw, :] = region * alpha[bi, i, j]
                m += 1
    return out, alpha
