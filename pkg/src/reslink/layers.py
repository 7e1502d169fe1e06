"""Elementwise and normalisation layers with hand-written backward passes.

All layers are mode-aware where it matters: batch normalisation switches
between batch statistics (TRAIN) and running statistics (INFER), dropout is
the identity outside TRAIN.  Forward functions that need state for the
backward pass return a cache tuple alongside their output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, DimensionError, UsageError

TRAIN = "train"
INFER = "infer"


def _check_mode(mode: str) -> None:
    if mode not in (TRAIN, INFER):
        raise UsageError(f"mode must be {TRAIN!r} or {INFER!r}, got {mode!r}")


# ---------------------------------------------------------------------------
# batch normalisation


@dataclass
class BatchNormState:
    """Learnable scale/shift plus running statistics for one channel axis.

    Running statistics are updated in place during TRAIN forwards
    (running <- momentum * running + (1 - momentum) * batch) using the
    biased batch variance, and are what INFER normalises with.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    epsilon: float = 1e-5

    @classmethod
    def create(cls, channels: int, dtype=np.float32, momentum: float = 0.9,
               epsilon: float = 1e-5) -> "BatchNormState":
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            epsilon=epsilon,
        )


def batchnorm_forward(x: np.ndarray, state: BatchNormState,
                      mode: str) -> tuple[np.ndarray, tuple]:
    """Normalise an NHWC tensor per channel; returns (output, cache)."""
    _check_mode(mode)
    if x.ndim != 4:
        raise DimensionError(f"batchnorm expects a rank-4 input, got {x.shape}")
    c = x.shape[3]
    if state.gamma.shape != (c,):
        raise DimensionError(
            f"batchnorm channel mismatch: input {x.shape} vs gamma {state.gamma.shape}"
        )
    if mode == INFER:
        inv_std = 1.0 / np.sqrt(state.running_var + state.epsilon)
        xhat = (x - state.running_mean) * inv_std
        return state.gamma * xhat + state.beta, (INFER,)

    count = x.shape[0] * x.shape[1] * x.shape[2]
    if count < 2:
        raise DataError(
            f"degenerate batch: batchnorm TRAIN needs at least 2 values per "
            f"channel, got {count} from input {x.shape}"
        )
    mean = x.mean(axis=(0, 1, 2))
    var = x.var(axis=(0, 1, 2))
    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    xhat = (x - mean) * inv_std
    out = state.gamma * xhat + state.beta
    m = state.momentum
    state.running_mean[...] = m * state.running_mean + (1.0 - m) * mean
    state.running_var[...] = m * state.running_var + (1.0 - m) * var
    return out, (TRAIN, xhat, inv_std, state.gamma)


def batchnorm_backward(cache: tuple,
                       grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Backprop through TRAIN-mode batchnorm, including the batch statistics."""
    if cache[0] != TRAIN:
        raise UsageError("batchnorm backward requires a TRAIN-mode forward cache")
    _, xhat, inv_std, gamma = cache
    grad_beta = grad_out.sum(axis=(0, 1, 2))
    grad_gamma = (grad_out * xhat).sum(axis=(0, 1, 2))
    dxhat = grad_out * gamma
    grad_x = inv_std * (
        dxhat
        - dxhat.mean(axis=(0, 1, 2))
        - xhat * (dxhat * xhat).mean(axis=(0, 1, 2))
    )
    return grad_x.astype(grad_out.dtype, copy=False), grad_gamma, grad_beta


# ---------------------------------------------------------------------------
# activations


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Gradient is zero at exactly 0 (the kink passes nothing through)."""
    return grad_out * (x > 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic: never exponentiates a positive argument."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(y: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * y * (1.0 - y)


def softmax(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a [n, k] score matrix (max-shifted for stability)."""
    if x.ndim != 2:
        raise DimensionError(f"softmax expects a rank-2 input, got {x.shape}")
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(y: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return y * (grad_out - (grad_out * y).sum(axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# dropout


@dataclass(frozen=True)
class DropoutSpec:
    rate: float
    mode: str

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise DataError(f"dropout rate must be in [0, 1), got {self.rate}")
        _check_mode(self.mode)


def dropout(x: np.ndarray, spec: DropoutSpec,
            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Inverted dropout; returns (output, keep_mask).

    INFER mode and rate 0 are the exact identity and consume no random
    draws, so inference never advances the model's PRNG stream.
    """
    if spec.mode == INFER or spec.rate == 0.0:
        return x, np.ones(x.shape, dtype=bool)
    keep = rng.random(x.shape) >= spec.rate
    return x * keep / (1.0 - spec.rate), keep


def dropout_backward(keep: np.ndarray, rate: float,
                     grad_out: np.ndarray) -> np.ndarray:
    return grad_out * keep / (1.0 - rate)


# ---------------------------------------------------------------------------
# pooling head and dense layer


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """Spatial mean of an NHWC tensor -> [n, c]."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects a rank-4 input, got {x.shape}")
    return x.mean(axis=(1, 2))


def global_avg_pool_backward(input_shape: tuple,
                             grad_out: np.ndarray) -> np.ndarray:
    n, h, w, c = input_shape
    if grad_out.shape != (n, c):
        raise DimensionError(
            f"global_avg_pool upstream {grad_out.shape} does not match ({n}, {c})"
        )
    g = grad_out / (h * w)
    return np.broadcast_to(g[:, None, None, :], input_shape).astype(
        grad_out.dtype, copy=True)


@dataclass
class DenseParams:
    w: np.ndarray  # [in_features, out_features]
    b: np.ndarray  # [out_features]


def dense(x: np.ndarray, params: DenseParams) -> np.ndarray:
    if x.ndim != 2:
        raise DimensionError(f"dense expects a rank-2 input, got {x.shape}")
    if x.shape[1] != params.w.shape[0]:
        raise DimensionError(
            f"dense feature mismatch: input {x.shape} vs weight {params.w.shape}"
        )
    return x @ params.w + params.b


def dense_backward(x: np.ndarray, params: DenseParams,
                   grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    grad_w = x.T @ grad_out
    grad_b = grad_out.sum(axis=0)
    grad_x = grad_out @ params.w.T
    return grad_x, grad_w, grad_b
