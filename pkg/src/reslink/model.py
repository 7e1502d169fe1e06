"""Model assembly: stem, attention-gated residual stages, pooled classifier.

The network is a straight pipeline:

    stem (7x7/2 conv, BN, ReLU, 3x3/2 maxpool)
    -> per stage: residual block(s) [area attention inside, optionally]
                  then a 3x3/2 downsample conv
    -> final area attention
    -> global average pool -> dropout -> dense -> sigmoid | softmax

Residual blocks follow conv-BN-ReLU-conv-BN with an identity shortcut when
the channel count is unchanged and a 1x1 projection (+BN) otherwise.  When
attention is enabled the convolution branch reads the gated map; by default
the shortcut reads the original pre-attention input (configurable).

All parameters live in a flat registry of (name, array) pairs in build
order; gradients come back from ``backward`` aligned with that registry.
Running batchnorm statistics are tracked separately as non-trainable state
so checkpoints can restore inference behaviour exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from .attention import (AreaAttentionParams, area_attention_backward,
                        area_attention_forward)
from .errors import ConfigError, DimensionError, NumericFaultError, UsageError
from .layers import (TRAIN, INFER, BatchNormState, DenseParams, DropoutSpec,
                     batchnorm_backward, batchnorm_forward, dense,
                     dense_backward, dropout, dropout_backward,
                     global_avg_pool, global_avg_pool_backward, relu,
                     relu_backward, sigmoid, sigmoid_backward, softmax,
                     softmax_backward)
from .tensor import (ConvSpec, SAME, conv2d, conv2d_backward, maxpool2d,
                     maxpool2d_backward)

SIGMOID = "sigmoid"
SOFTMAX = "softmax"

_DTYPES = {"f32": np.float32, "f64": np.float64}

_STEM_SPEC = ConvSpec(7, 7, 2, SAME)
_BLOCK_SPEC = ConvSpec(3, 3, 1, SAME)
_PROJ_SPEC = ConvSpec(1, 1, 1, SAME)
_DOWN_SPEC = ConvSpec(3, 3, 2, SAME)
_POOL = (3, 3, 2, SAME)


@dataclass
class ModelConfig:
    input_h: int = 224
    input_w: int = 224
    input_c: int = 3
    stem_filters: int = 32
    stage_filters: tuple = (32, 64, 128)
    blocks_per_stage: int = 1
    attention_in_blocks: bool = True
    area_h: int = 7
    area_w: int = 7
    dropout_rate: float = 0.3
    num_classes: int = 1
    head: str = SIGMOID
    shortcut_after_attention: bool = False
    dtype: str = "f32"

    def __post_init__(self):
        self.stage_filters = tuple(int(f) for f in self.stage_filters)
        self.validate()

    def validate(self) -> None:
        for name in ("input_h", "input_w", "input_c", "stem_filters",
                     "blocks_per_stage", "area_h", "area_w", "num_classes"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"model.{name} must be a positive integer, got {v!r}")
        if not self.stage_filters or any(f < 1 for f in self.stage_filters):
            raise ConfigError(
                f"model.stage_filters must be a non-empty list of positive "
                f"integers, got {self.stage_filters!r}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(
                f"model.dropout_rate must be in [0, 1), got {self.dropout_rate!r}"
            )
        if self.head not in (SIGMOID, SOFTMAX):
            raise ConfigError(
                f"model.head must be {SIGMOID!r} or {SOFTMAX!r}, got {self.head!r}"
            )
        if self.head == SIGMOID and self.num_classes != 1:
            raise ConfigError(
                f"model.head {SIGMOID!r} requires num_classes == 1, "
                f"got {self.num_classes}"
            )
        if self.head == SOFTMAX and self.num_classes < 2:
            raise ConfigError(
                f"model.head {SOFTMAX!r} requires num_classes >= 2, "
                f"got {self.num_classes}"
            )
        if self.dtype not in _DTYPES:
            raise ConfigError(f"model.dtype must be 'f32' or 'f64', got {self.dtype!r}")

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_filters"] = list(self.stage_filters)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config key(s): {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# parameter containers and initialisers


@dataclass
class StemParams:
    kernel: np.ndarray
    bn: BatchNormState


@dataclass
class ProjectionParams:
    kernel: np.ndarray
    bn: BatchNormState


@dataclass
class ResidualBlockParams:
    conv1: np.ndarray
    bn1: BatchNormState
    conv2: np.ndarray
    bn2: BatchNormState
    projection: Optional[ProjectionParams]
    attention: Optional[AreaAttentionParams]


@dataclass
class DownsampleParams:
    kernel: np.ndarray
    bn: BatchNormState


@dataclass
class StageParams:
    blocks: list
    down: DownsampleParams


def he_kernel(rng: np.random.Generator, kh: int, kw: int, cin: int, cout: int,
              dtype) -> np.ndarray:
    """He-normal conv kernel: std = sqrt(2 / fan_in)."""
    std = math.sqrt(2.0 / (kh * kw * cin))
    return rng.normal(0.0, std, (kh, kw, cin, cout)).astype(dtype)


def init_stem(rng: np.random.Generator, in_c: int, filters: int,
              dtype) -> StemParams:
    return StemParams(
        kernel=he_kernel(rng, 7, 7, in_c, filters, dtype),
        bn=BatchNormState.create(filters, dtype=dtype),
    )


def init_block(rng: np.random.Generator, in_c: int, filters: int,
               attention: bool, area_h: int, area_w: int,
               dtype) -> ResidualBlockParams:
    attn = (AreaAttentionParams.create(in_c, area_h, area_w, rng, dtype=dtype)
            if attention else None)
    conv1 = he_kernel(rng, 3, 3, in_c, filters, dtype)
    conv2 = he_kernel(rng, 3, 3, filters, filters, dtype)
    projection = None
    if in_c != filters:
        projection = ProjectionParams(
            kernel=he_kernel(rng, 1, 1, in_c, filters, dtype),
            bn=BatchNormState.create(filters, dtype=dtype),
        )
    return ResidualBlockParams(
        conv1=conv1, bn1=BatchNormState.create(filters, dtype=dtype),
        conv2=conv2, bn2=BatchNormState.create(filters, dtype=dtype),
        projection=projection, attention=attn,
    )


def init_downsample(rng: np.random.Generator, filters: int,
                    dtype) -> DownsampleParams:
    return DownsampleParams(
        kernel=he_kernel(rng, 3, 3, filters, filters, dtype),
        bn=BatchNormState.create(filters, dtype=dtype),
    )


# ---------------------------------------------------------------------------
# layer-group forwards and backwards


@dataclass
class StemCache:
    x: np.ndarray
    bn_out: np.ndarray
    pool_in: np.ndarray
    bn_cache: tuple
    argmax: np.ndarray


def stem_forward(x: np.ndarray, params: StemParams,
                 mode: str) -> tuple[np.ndarray, StemCache]:
    conv = conv2d(x, params.kernel, _STEM_SPEC)
    bn_out, bn_cache = batchnorm_forward(conv, params.bn, mode)
    act = relu(bn_out)
    out, argmax = maxpool2d(act, *_POOL)
    return out, StemCache(x=x, bn_out=bn_out, pool_in=act,
                          bn_cache=bn_cache, argmax=argmax)


def stem_backward(params: StemParams, cache: StemCache,
                  grad_out: np.ndarray) -> tuple[np.ndarray, dict]:
    d_act = maxpool2d_backward(cache.pool_in, *_POOL, cache.argmax, grad_out)
    d_bn = relu_backward(cache.bn_out, d_act)
    d_conv, d_gamma, d_beta = batchnorm_backward(cache.bn_cache, d_bn)
    d_x, d_kernel = conv2d_backward(cache.x, params.kernel, _STEM_SPEC, d_conv)
    return d_x, {"conv.kernel": d_kernel, "bn.gamma": d_gamma, "bn.beta": d_beta}


@dataclass
class BlockCache:
    f: np.ndarray
    branch_in: np.ndarray
    attn_cache: object
    bn1_out: np.ndarray
    g1: np.ndarray
    bn1_cache: tuple
    bn2_cache: tuple
    proj_in: Optional[np.ndarray]
    proj_bn_cache: Optional[tuple]
    pre_act: np.ndarray
    shortcut_after_attention: bool


def residual_block_forward(f: np.ndarray, params: ResidualBlockParams, mode: str,
                           shortcut_after_attention: bool = False
                           ) -> tuple[np.ndarray, BlockCache]:
    """conv-BN-ReLU-conv-BN branch plus shortcut, gated by area attention.

    The residual branch consumes the attention-gated map when the block has
    attention; the shortcut consumes the raw input unless
    ``shortcut_after_attention`` is set.
    """
    attn_cache = None
    branch_in = f
    if params.attention is not None:
        branch_in, _, attn_cache = area_attention_forward(f, params.attention, mode)
    c1 = conv2d(branch_in, params.conv1, _BLOCK_SPEC)
    bn1_out, bn1_cache = batchnorm_forward(c1, params.bn1, mode)
    g1 = relu(bn1_out)
    c2 = conv2d(g1, params.conv2, _BLOCK_SPEC)
    g2, bn2_cache = batchnorm_forward(c2, params.bn2, mode)

    use_gated_shortcut = shortcut_after_attention and params.attention is not None
    shortcut_src = branch_in if use_gated_shortcut else f
    proj_bn_cache = None
    proj_in = None
    if params.projection is None:
        if f.shape[3] != g2.shape[3]:
            raise DimensionError(
                f"residual block with channel change {f.shape[3]} -> "
                f"{g2.shape[3]} needs a projection shortcut"
            )
        s = shortcut_src
    else:
        proj_in = shortcut_src
        pc = conv2d(shortcut_src, params.projection.kernel, _PROJ_SPEC)
        s, proj_bn_cache = batchnorm_forward(pc, params.projection.bn, mode)
    pre_act = g2 + s
    out = relu(pre_act)
    cache = BlockCache(
        f=f, branch_in=branch_in, attn_cache=attn_cache, bn1_out=bn1_out,
        g1=g1, bn1_cache=bn1_cache, bn2_cache=bn2_cache, proj_in=proj_in,
        proj_bn_cache=proj_bn_cache, pre_act=pre_act,
        shortcut_after_attention=use_gated_shortcut,
    )
    return out, cache


def residual_block_backward(params: ResidualBlockParams, cache: BlockCache,
                            grad_out: np.ndarray) -> tuple[np.ndarray, dict]:
    grads: dict = {}
    d_pre = relu_backward(cache.pre_act, grad_out)

    # Residual branch.
    d_c2, g2_gamma, g2_beta = batchnorm_backward(cache.bn2_cache, d_pre)
    grads["bn2.gamma"], grads["bn2.beta"] = g2_gamma, g2_beta
    d_g1, d_conv2 = conv2d_backward(cache.g1, params.conv2, _BLOCK_SPEC, d_c2)
    grads["conv2.kernel"] = d_conv2
    d_bn1 = relu_backward(cache.bn1_out, d_g1)
    d_c1, g1_gamma, g1_beta = batchnorm_backward(cache.bn1_cache, d_bn1)
    grads["bn1.gamma"], grads["bn1.beta"] = g1_gamma, g1_beta
    d_branch, d_conv1 = conv2d_backward(cache.branch_in, params.conv1,
                                        _BLOCK_SPEC, d_c1)
    grads["conv1.kernel"] = d_conv1

    # Shortcut.
    if params.projection is None:
        d_shortcut_src = d_pre
    else:
        d_pc, p_gamma, p_beta = batchnorm_backward(cache.proj_bn_cache, d_pre)
        grads["proj_bn.gamma"], grads["proj_bn.beta"] = p_gamma, p_beta
        d_shortcut_src, d_pk = conv2d_backward(
            cache.proj_in, params.projection.kernel, _PROJ_SPEC, d_pc)
        grads["proj.kernel"] = d_pk

    if params.attention is not None:
        up_attn = d_branch
        if cache.shortcut_after_attention:
            up_attn = d_branch + d_shortcut_src
        a = area_attention_backward(cache.attn_cache, up_attn)
        grads["attn.w1"], grads["attn.w2"] = a.w1, a.w2
        grads["attn.bn.gamma"], grads["attn.bn.beta"] = a.gamma, a.beta
        d_f = a.feature
        if not cache.shortcut_after_attention:
            d_f = d_f + d_shortcut_src
    else:
        d_f = d_branch + d_shortcut_src
    return d_f, grads


@dataclass
class DownCache:
    x: np.ndarray
    bn_out: np.ndarray
    bn_cache: tuple


def downsample_forward(x: np.ndarray, params: DownsampleParams,
                       mode: str) -> tuple[np.ndarray, DownCache]:
    conv = conv2d(x, params.kernel, _DOWN_SPEC)
    bn_out, bn_cache = batchnorm_forward(conv, params.bn, mode)
    return relu(bn_out), DownCache(x=x, bn_out=bn_out, bn_cache=bn_cache)


def downsample_backward(params: DownsampleParams, cache: DownCache,
                        grad_out: np.ndarray) -> tuple[np.ndarray, dict]:
    d_bn = relu_backward(cache.bn_out, grad_out)
    d_conv, d_gamma, d_beta = batchnorm_backward(cache.bn_cache, d_bn)
    d_x, d_kernel = conv2d_backward(cache.x, params.kernel, _DOWN_SPEC, d_conv)
    return d_x, {"kernel": d_kernel, "bn.gamma": d_gamma, "bn.beta": d_beta}


# ---------------------------------------------------------------------------
# whole-model assembly


@dataclass
class ModelCache:
    mode: str
    stem: Optional[StemCache] = None
    stages: list = field(default_factory=list)  # [(block_caches, down_cache)]
    final_attn: object = None
    gap_in_shape: tuple = ()
    keep_mask: Optional[np.ndarray] = None
    dense_in: Optional[np.ndarray] = None
    y_hat: Optional[np.ndarray] = None


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NumericFaultError(f"non-finite values detected at layer {name!r}")


def compute_shape_table(config: ModelConfig) -> list:
    """Per-layer output shapes for a symbolic batch dimension."""
    def half(v):  # SAME stride-2 output extent
        return -(-v // 2)

    entries = [("input", (config.input_h, config.input_w, config.input_c))]
    h, w = half(config.input_h), half(config.input_w)
    entries.append(("stem.conv", (h, w, config.stem_filters)))
    h, w = half(h), half(w)
    entries.append(("stem.pool", (h, w, config.stem_filters)))
    for si, f in enumerate(config.stage_filters, start=1):
        for bi in range(1, config.blocks_per_stage + 1):
            entries.append((f"stage{si}.block{bi}", (h, w, f)))
        h, w = half(h), half(w)
        entries.append((f"stage{si}.down", (h, w, f)))
    c = config.stage_filters[-1]
    entries.append(("final_attn", (h, w, c)))
    entries.append(("gap", (c,)))
    entries.append(("head", (config.num_classes,)))
    return entries


def format_shape_table(entries: list) -> str:
    lines = [f"{name}: Nx" + "x".join(str(v) for v in shape)
             for name, shape in entries]
    return "\n".join(lines) + "\n"


class ResLinkModel:
    """A built network: parameters, PRNG, mode, and forward/backward."""

    def __init__(self, config: ModelConfig, stem: StemParams, stages: list,
                 final_attention: AreaAttentionParams, head: DenseParams,
                 rng: np.random.Generator):
        self.config = config
        self.stem = stem
        self.stages = stages
        self.final_attention = final_attention
        self.head = head
        self.rng = rng
        self.mode = TRAIN
        self.shape_table = compute_shape_table(config)
        self._trainable, self._state = self._register()
        names = [n for n, _ in self._trainable]
        if len(names) != len(set(names)):
            raise UsageError("parameter registry contains duplicate names")

    # -- registry ----------------------------------------------------------

    def _register(self) -> tuple[list, list]:
        trainable: list = []
        state: list = []

        def bn_entries(prefix: str, bn: BatchNormState):
            trainable.append((f"{prefix}.gamma", bn.gamma))
            trainable.append((f"{prefix}.beta", bn.beta))
            state.append((f"{prefix}.running_mean", bn.running_mean))
            state.append((f"{prefix}.running_var", bn.running_var))

        def attn_entries(prefix: str, attn: AreaAttentionParams):
            trainable.append((f"{prefix}.w1", attn.w1))
            bn_entries(f"{prefix}.bn", attn.bn)
            trainable.append((f"{prefix}.w2", attn.w2))

        trainable.append(("stem.conv.kernel", self.stem.kernel))
        bn_entries("stem.bn", self.stem.bn)
        for si, stage in enumerate(self.stages, start=1):
            for bi, block in enumerate(stage.blocks, start=1):
                p = f"stage{si}.block{bi}"
                if block.attention is not None:
                    attn_entries(f"{p}.attn", block.attention)
                trainable.append((f"{p}.conv1.kernel", block.conv1))
                bn_entries(f"{p}.bn1", block.bn1)
                trainable.append((f"{p}.conv2.kernel", block.conv2))
                bn_entries(f"{p}.bn2", block.bn2)
                if block.projection is not None:
                    trainable.append((f"{p}.proj.kernel", block.projection.kernel))
                    bn_entries(f"{p}.proj_bn", block.projection.bn)
            trainable.append((f"stage{si}.down.kernel", stage.down.kernel))
            bn_entries(f"stage{si}.down_bn", stage.down.bn)
        attn_entries("final_attn", self.final_attention)
        trainable.append(("head.w", self.head.w))
        trainable.append(("head.b", self.head.b))
        return trainable, trainable + state

    def parameters(self) -> list:
        """Trainable (name, array) pairs in registration order."""
        return list(self._trainable)

    def state_arrays(self) -> list:
        """Trainable parameters plus batchnorm running statistics."""
        return list(self._state)

    # -- forward / backward -------------------------------------------------

    def forward(self, x: np.ndarray,
                mode: Optional[str] = None) -> tuple[np.ndarray, ModelCache]:
        mode = self.mode if mode is None else mode
        if mode not in (TRAIN, INFER):
            raise UsageError(f"mode must be {TRAIN!r} or {INFER!r}, got {mode!r}")
        cfg = self.config
        if x.ndim != 4 or x.shape[1:] != (cfg.input_h, cfg.input_w, cfg.input_c):
            raise DimensionError(
                f"model input {getattr(x, 'shape', type(x))} does not match "
                f"configured (N, {cfg.input_h}, {cfg.input_w}, {cfg.input_c})"
            )
        x = x.astype(cfg.np_dtype, copy=False)
        _check_finite("input", x)
        keep = mode == TRAIN
        cache = ModelCache(mode=mode)

        out, stem_cache = stem_forward(x, self.stem, mode)
        _check_finite("stem", out)
        if keep:
            cache.stem = stem_cache
        for si, stage in enumerate(self.stages, start=1):
            block_caches = []
            for bi, block in enumerate(stage.blocks, start=1):
                out, bc = residual_block_forward(
                    out, block, mode,
                    shortcut_after_attention=cfg.shortcut_after_attention)
                _check_finite(f"stage{si}.block{bi}", out)
                block_caches.append(bc)
            out, dc = downsample_forward(out, stage.down, mode)
            _check_finite(f"stage{si}.down", out)
            if keep:
                cache.stages.append((block_caches, dc))
        out, _, fa_cache = area_attention_forward(out, self.final_attention, mode)
        _check_finite("final_attn", out)
        if keep:
            cache.final_attn = fa_cache
            cache.gap_in_shape = out.shape
        z = global_avg_pool(out)
        zd, keep_mask = dropout(z, DropoutSpec(cfg.dropout_rate, mode), self.rng)
        logits = dense(zd, self.head)
        y_hat = sigmoid(logits) if cfg.head == SIGMOID else softmax(logits)
        _check_finite("head", y_hat)
        if keep:
            cache.keep_mask = keep_mask
            cache.dense_in = zd
            cache.y_hat = y_hat
        return y_hat, cache

    def backward(self, cache: ModelCache, upstream: np.ndarray) -> list:
        """Gradients w.r.t. every trainable parameter, in registry order.

        ``upstream`` is d(loss)/d(y_hat), i.e. the gradient returned by the
        loss functions in ``optim``.
        """
        if cache.mode != TRAIN:
            raise UsageError("backward requires a cache from a TRAIN-mode forward")
        cfg = self.config
        y_hat = cache.y_hat
        if upstream.shape != y_hat.shape:
            raise DimensionError(
                f"upstream gradient {upstream.shape} does not match model "
                f"output {y_hat.shape}"
            )
        grads: dict = {}

        if cfg.head == SIGMOID:
            d_logits = sigmoid_backward(y_hat, upstream)
        else:
            d_logits = softmax_backward(y_hat, upstream)
        d_zd, d_w, d_b = dense_backward(cache.dense_in, self.head, d_logits)
        grads["head.w"], grads["head.b"] = d_w, d_b
        d_z = dropout_backward(cache.keep_mask, cfg.dropout_rate, d_zd)
        d_map = global_avg_pool_backward(cache.gap_in_shape, d_z)

        a = area_attention_backward(cache.final_attn, d_map)
        grads["final_attn.w1"], grads["final_attn.w2"] = a.w1, a.w2
        grads["final_attn.bn.gamma"], grads["final_attn.bn.beta"] = a.gamma, a.beta
        d_out = a.feature

        for si in range(len(self.stages), 0, -1):
            stage = self.stages[si - 1]
            block_caches, down_cache = cache.stages[si - 1]
            d_out, down_grads = downsample_backward(stage.down, down_cache, d_out)
            for key, g in down_grads.items():
                grads[f"stage{si}.down.{key}" if key == "kernel"
                      else f"stage{si}.down_{key}"] = g
            for bi in range(len(stage.blocks), 0, -1):
                d_out, block_grads = residual_block_backward(
                    stage.blocks[bi - 1], block_caches[bi - 1], d_out)
                for key, g in block_grads.items():
                    grads[f"stage{si}.block{bi}.{key}"] = g

        _, stem_grads = stem_backward(self.stem, cache.stem, d_out)
        for key, g in stem_grads.items():
            grads[f"stem.{key}"] = g

        names = [n for n, _ in self._trainable]
        if set(grads) != set(names):
            missing = sorted(set(names) - set(grads))
            extra = sorted(set(grads) - set(names))
            raise UsageError(
                f"gradient/registry mismatch: missing {missing}, extra {extra}"
            )
        return [grads[n] for n in names]


def build_model(config: ModelConfig, seed: int) -> ResLinkModel:
    """Initialise all parameters from a seeded PRNG.

    Conv kernels are He-normal, the dense head is Glorot-uniform, batchnorm
    starts at gamma=1 / beta=0 with running statistics (0, 1).  Draw order
    is fixed, so two builds with the same seed are bitwise identical.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    dtype = config.np_dtype

    stem = init_stem(rng, config.input_c, config.stem_filters, dtype)
    stages = []
    channels = config.stem_filters
    for f in config.stage_filters:
        blocks = []
        for _ in range(config.blocks_per_stage):
            blocks.append(init_block(rng, channels, f, config.attention_in_blocks,
                                     config.area_h, config.area_w, dtype))
            channels = f
        stages.append(StageParams(blocks=blocks, down=init_downsample(rng, f, dtype)))
    final_attention = AreaAttentionParams.create(
        channels, config.area_h, config.area_w, rng, dtype=dtype)

    limit = math.sqrt(6.0 / (channels + config.num_classes))
    head = DenseParams(
        w=rng.uniform(-limit, limit, (channels, config.num_classes)).astype(dtype),
        b=np.zeros(config.num_classes, dtype=dtype),
    )
    return ResLinkModel(config, stem, stages, final_attention, head, rng)
