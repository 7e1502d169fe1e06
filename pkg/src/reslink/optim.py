"""Losses, Adam, and the epoch training loop.

Losses return (scalar loss, gradient w.r.t. y_hat) so the model's backward
can be driven directly.  Adam keeps one (m, v) slot per registered
parameter and updates in place; the step counter increments before bias
correction, matching the usual formulation:

    t <- t + 1
    m <- b1*m + (1-b1)*g          v <- b2*v + (1-b2)*g^2
    p <- p - lr * (m/(1-b1^t)) / (sqrt(v/(1-b2^t)) + eps)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DimensionError, NumericFaultError
from .layers import TRAIN, INFER
from .metrics import classify_threshold
from .model import SIGMOID, ResLinkModel

_CLIP = 1e-7


def _check_loss_args(y_hat: np.ndarray, y: np.ndarray) -> None:
    if y_hat.shape != y.shape:
        raise DimensionError(
            f"loss shape mismatch: predictions {y_hat.shape} vs targets {y.shape}"
        )
    if y_hat.ndim != 2 or y_hat.shape[0] == 0:
        raise DimensionError(
            f"loss expects a non-empty [n, k] prediction matrix, got {y_hat.shape}"
        )
    if np.isnan(y_hat).any():
        raise NumericFaultError("NaN predictions passed to loss")


def bce_loss(y_hat: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy over the batch; y in {0, 1}.

    Predictions are clipped to [1e-7, 1 - 1e-7] and the gradient is taken
    at the clipped value.
    """
    _check_loss_args(y_hat, y)
    if not np.isin(y, (0, 1)).all():
        raise DataError("bce_loss targets must be 0 or 1")
    p = np.clip(y_hat, _CLIP, 1.0 - _CLIP)
    n = y_hat.shape[0]
    loss = float(-np.sum(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)) / n)
    grad = ((p - y) / (p * (1.0 - p)) / n).astype(y_hat.dtype, copy=False)
    return loss, grad


def cce_loss(y_hat: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean categorical cross-entropy; y must be one-hot rows."""
    _check_loss_args(y_hat, y)
    rows_onehot = np.isin(y, (0, 1)).all() and (y.sum(axis=1) == 1).all()
    if not rows_onehot:
        raise DataError("cce_loss targets must be one-hot rows")
    p = np.clip(y_hat, _CLIP, 1.0 - _CLIP)
    n = y_hat.shape[0]
    loss = float(-np.sum(y * np.log(p)) / n)
    grad = (-(y / p) / n).astype(y_hat.dtype, copy=False)
    return loss, grad


class AdamState:
    """Per-parameter first/second moment slots plus the shared step count."""

    def __init__(self, params: list, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8):
        if lr <= 0 or not (0 <= beta1 < 1) or not (0 <= beta2 < 1) or epsilon <= 0:
            raise DataError(
                f"bad Adam hyperparameters: lr={lr}, beta1={beta1}, "
                f"beta2={beta2}, epsilon={epsilon}"
            )
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.t = 0
        self.m = [np.zeros_like(p) for _, p in params]
        self.v = [np.zeros_like(p) for _, p in params]


def adam_step(params: list, grads: list, state: AdamState) -> None:
    """One in-place Adam update; touches every parameter exactly once."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError(
            f"adam_step got {len(params)} params, {len(grads)} grads, "
            f"{len(state.m)} moment slots"
        )
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for (name, p), g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise DimensionError(
                f"gradient shape {g.shape} does not match parameter "
                f"{name!r} {p.shape}"
            )
        m[...] = state.beta1 * m + (1.0 - state.beta1) * g
        v[...] = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)).astype(
            p.dtype, copy=False)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)

    CSV_HEADER = "epoch,train_loss,train_acc,val_loss,val_acc"

    def to_csv_text(self) -> str:
        lines = [self.CSV_HEADER]
        for e in self.epochs:
            lines.append(
                f"{e.epoch},{e.train_loss:.6f},{e.train_acc:.6f},"
                f"{e.val_loss:.6f},{e.val_acc:.6f}"
            )
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        with open(path, "w", newline="\n") as fh:
            fh.write(self.to_csv_text())


def _targets_for(model: ResLinkModel, labels: np.ndarray) -> np.ndarray:
    dtype = model.config.np_dtype
    if model.config.head == SIGMOID:
        return labels.astype(dtype)[:, None]
    k = model.config.num_classes
    if labels.max(initial=0) >= k:
        raise DataError(
            f"label {int(labels.max())} out of range for {k} configured classes"
        )
    onehot = np.zeros((labels.shape[0], k), dtype=dtype)
    onehot[np.arange(labels.shape[0]), labels] = 1
    return onehot


def _loss_for(model: ResLinkModel):
    return bce_loss if model.config.head == SIGMOID else cce_loss


def run_inference(model: ResLinkModel, ds, batch_size: int,
                  loader) -> tuple[float, float, np.ndarray, np.ndarray]:
    """Full INFER pass; returns (mean loss, accuracy, y_true, y_pred)."""
    loss_fn = _loss_for(model)
    loss_sum = 0.0
    trues, preds = [], []
    for x, labels in loader.batches(ds, batch_size, shuffle=False):
        y_hat, _ = model.forward(x, INFER)
        loss, _ = loss_fn(y_hat, _targets_for(model, labels))
        loss_sum += loss * labels.shape[0]
        trues.append(labels)
        preds.append(classify_threshold(y_hat))
    y_true = np.concatenate(trues)
    y_pred = np.concatenate(preds)
    n = y_true.shape[0]
    return loss_sum / n, float((y_true == y_pred).mean()), y_true, y_pred


def train(model: ResLinkModel, train_data, val_data, epochs: int,
          batch_size: int, adam: AdamState, seed: int, loader,
          progress=None) -> TrainReport:
    """Run the optimisation loop; returns per-epoch stats.

    Batches are reshuffled every epoch from a PRNG seeded once with
    ``seed``, so the whole schedule is a pure function of (datasets, seed).
    Train loss/accuracy are accumulated from the TRAIN-mode forward of each
    step (i.e. with the weights current at that step); validation runs a
    full INFER pass after each epoch.
    """
    if epochs < 0 or batch_size < 1:
        raise DataError(f"bad loop bounds: epochs={epochs}, batch_size={batch_size}")
    if epochs > 0 and (len(train_data.samples) == 0 or len(val_data.samples) == 0):
        raise DataError("train() requires non-empty train and validation datasets")
    report = TrainReport()
    rng = np.random.default_rng(seed)
    loss_fn = _loss_for(model)
    params = model.parameters()

    for epoch in range(1, epochs + 1):
        model.mode = TRAIN
        loss_sum = 0.0
        correct = 0
        seen = 0
        for bi, (x, labels) in enumerate(
                loader.batches(train_data, batch_size, shuffle=True, rng=rng)):
            y = _targets_for(model, labels)
            y_hat, cache = model.forward(x, TRAIN)
            loss, d_yhat = loss_fn(y_hat, y)
            if not np.isfinite(loss):
                raise NumericFaultError(
                    f"loss diverged at epoch {epoch} batch {bi}"
                )
            grads = model.backward(cache, d_yhat)
            adam_step(params, grads, adam)
            n = labels.shape[0]
            loss_sum += loss * n
            correct += int((classify_threshold(y_hat) == labels).sum())
            seen += n
        model.mode = INFER
        val_loss, val_acc, _, _ = run_inference(model, val_data, batch_size, loader)
        stats = EpochStats(
            epoch=epoch,
            train_loss=loss_sum / seen,
            train_acc=correct / seen,
            val_loss=val_loss,
            val_acc=val_acc,
        )
        report.epochs.append(stats)
        if progress is not None:
            progress(stats)
    return report
