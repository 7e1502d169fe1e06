"""Losses, Adam updates, and the training loop."""

import numpy as np
import pytest

from reslink.data import BatchLoader, LabeledDataset
from reslink.errors import DataError, DimensionError, NumericFaultError
from reslink.model import SOFTMAX
from reslink.optim import (AdamState, EpochStats, TrainReport, adam_step,
                           bce_loss, cce_loss, run_inference, train)
from reslink.model import ModelConfig, build_model

from oracles import adam_oracle


# ---------------------------------------------------------------------------
# losses


def test_bce_of_even_odds_is_ln2():
    loss, _ = bce_loss(np.array([[0.5]]), np.array([[1.0]]))
    assert abs(loss - np.log(2.0)) < 1e-9


def test_bce_hand_value_and_gradient():
    # y=1, p=0.8: loss = -ln 0.8, d/dp = (p-1)/(p(1-p)) = -1.25
    loss, grad = bce_loss(np.array([[0.8]]), np.array([[1.0]]))
    np.testing.assert_allclose(loss, -np.log(0.8), rtol=1e-12)
    np.testing.assert_allclose(grad, [[-1.25]], rtol=1e-12)


def test_bce_batch_mean():
    y_hat = np.array([[0.5], [0.5]])
    y = np.array([[1.0], [0.0]])
    loss, grad = bce_loss(y_hat, y)
    np.testing.assert_allclose(loss, np.log(2.0), rtol=1e-12)
    # Mean over the batch: each sample's gradient is divided by n.
    np.testing.assert_allclose(grad, [[-1.0], [1.0]], rtol=1e-12)


def test_bce_clipping_keeps_confident_mistakes_finite():
    loss, grad = bce_loss(np.array([[1.0]]), np.array([[0.0]]))
    assert np.isfinite(loss) and np.isfinite(grad).all()
    np.testing.assert_allclose(loss, -np.log(1e-7), rtol=1e-6)


def test_bce_rejects_non_binary_targets():
    with pytest.raises(DataError):
        bce_loss(np.array([[0.5]]), np.array([[0.3]]))


def test_bce_rejects_shape_mismatch_and_nan():
    with pytest.raises(DimensionError):
        bce_loss(np.zeros((2, 1)), np.zeros((3, 1)))
    with pytest.raises(NumericFaultError):
        bce_loss(np.array([[np.nan]]), np.array([[1.0]]))


def test_cce_hand_value_and_gradient():
    y_hat = np.array([[0.2, 0.5, 0.3]])
    y = np.array([[0.0, 1.0, 0.0]])
    loss, grad = cce_loss(y_hat, y)
    np.testing.assert_allclose(loss, -np.log(0.5), rtol=1e-12)
    np.testing.assert_allclose(grad, [[0.0, -2.0, 0.0]], rtol=1e-12)


def test_cce_rejects_non_onehot():
    with pytest.raises(DataError):
        cce_loss(np.array([[0.5, 0.5]]), np.array([[1.0, 1.0]]))
    with pytest.raises(DataError):
        cce_loss(np.array([[0.5, 0.5]]), np.array([[0.7, 0.3]]))


# ---------------------------------------------------------------------------
# Adam


def _scalar_params(value=0.0):
    return [("w", np.array([value], dtype=np.float64))]


def test_adam_first_step_closed_form():
    # With g=1 the bias corrections cancel: step = -lr / (1 + eps).
    params = _scalar_params(0.0)
    state = AdamState(params, lr=1e-3)
    adam_step(params, [np.array([1.0])], state)
    expected = -1e-3 / (1.0 + 1e-8)
    assert abs(float(params[0][1][0]) - expected) < 1e-12
    assert state.t == 1


def test_adam_ten_steps_match_scalar_oracle():
    params = _scalar_params(1.0)
    state = AdamState(params, lr=0.05)
    trajectory = []
    for _ in range(10):
        w = float(params[0][1][0])
        adam_step(params, [np.array([2.0 * w])], state)  # d/dw of w^2
        trajectory.append(float(params[0][1][0]))
    want = adam_oracle(1.0, lambda w: 2.0 * w, 10, lr=0.05)
    np.testing.assert_allclose(trajectory, want, rtol=0, atol=1e-10)


def test_adam_updates_in_place():
    params = _scalar_params(0.5)
    ref = params[0][1]
    state = AdamState(params)
    adam_step(params, [np.array([1.0])], state)
    assert params[0][1] is ref


def test_adam_moment_slots_shape_checked():
    params = _scalar_params()
    state = AdamState(params)
    with pytest.raises(DimensionError):
        adam_step(params, [np.zeros(2)], state)
    with pytest.raises(DimensionError):
        adam_step(params, [], state)


def test_adam_rejects_bad_hyperparameters():
    for kwargs in (dict(lr=0.0), dict(beta1=1.0), dict(beta2=-0.1),
                   dict(epsilon=0.0)):
        with pytest.raises(DataError):
            AdamState(_scalar_params(), **kwargs)


def test_adam_preserves_f32_parameter_dtype():
    params = [("w", np.zeros(3, dtype=np.float32))]
    state = AdamState(params)
    adam_step(params, [np.ones(3, dtype=np.float32)], state)
    assert params[0][1].dtype == np.float32


# ---------------------------------------------------------------------------
# training loop


def _toy_dataset(n_per_class=8, seed=0):
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n_per_class):
        samples.append((rng.uniform(0.0, 0.3, (8, 8, 1)).astype(np.float32), 0))
    for _ in range(n_per_class):
        samples.append((rng.uniform(0.7, 1.0, (8, 8, 1)).astype(np.float32), 1))
    return LabeledDataset(samples=samples, class_names=["low", "high"])


def _toy_model(seed=0, **overrides):
    cfg = dict(input_h=8, input_w=8, input_c=1, stem_filters=4,
               stage_filters=(4,), area_h=2, area_w=2, dropout_rate=0.0)
    cfg.update(overrides)
    return build_model(ModelConfig(**cfg), seed)


def test_train_runs_and_reports_every_epoch():
    model = _toy_model(seed=1)
    ds = _toy_dataset()
    loader = BatchLoader((8, 8), 1)
    adam = AdamState(model.parameters(), lr=1e-2)
    seen = []
    report = train(model, ds, ds, epochs=3, batch_size=4, adam=adam, seed=5,
                   loader=loader, progress=lambda s: seen.append(s.epoch))
    assert [e.epoch for e in report.epochs] == [1, 2, 3]
    assert seen == [1, 2, 3]
    assert report.epochs[-1].train_loss < report.epochs[0].train_loss


def test_train_is_seed_deterministic():
    def run():
        model = _toy_model(seed=2)
        adam = AdamState(model.parameters(), lr=1e-2)
        loader = BatchLoader((8, 8), 1)
        ds = _toy_dataset()
        return train(model, ds, ds, 2, 4, adam, seed=9, loader=loader)

    assert run().to_csv_text() == run().to_csv_text()


def test_train_softmax_head_path():
    model = _toy_model(seed=3, head=SOFTMAX, num_classes=2)
    ds = _toy_dataset()
    loader = BatchLoader((8, 8), 1)
    adam = AdamState(model.parameters(), lr=1e-2)
    report = train(model, ds, ds, 1, 4, adam, seed=6, loader=loader)
    assert len(report.epochs) == 1
    assert 0.0 <= report.epochs[0].val_acc <= 1.0


def test_train_rejects_empty_datasets():
    model = _toy_model(seed=4)
    empty = LabeledDataset(samples=[], class_names=["low", "high"])
    loader = BatchLoader((8, 8), 1)
    adam = AdamState(model.parameters())
    with pytest.raises(DataError):
        train(model, empty, empty, 1, 4, adam, seed=0, loader=loader)


def test_run_inference_accuracy_matches_recount():
    model = _toy_model(seed=5)
    ds = _toy_dataset()
    loader = BatchLoader((8, 8), 1)
    loss, acc, y_true, y_pred = run_inference(model, ds, 4, loader)
    assert y_true.shape == y_pred.shape == (len(ds.samples),)
    assert acc == (y_true == y_pred).mean()
    assert np.isfinite(loss)


def test_report_csv_format():
    report = TrainReport(epochs=[
        EpochStats(1, 0.6931471, 0.5, 0.25, 1.0),
        EpochStats(2, 0.5, 0.75, 0.125, 1.0),
    ])
    text = report.to_csv_text()
    lines = text.splitlines()
    assert lines[0] == "epoch,train_loss,train_acc,val_loss,val_acc"
    assert lines[1] == "1,0.693147,0.500000,0.250000,1.000000"
    assert lines[2] == "2,0.500000,0.750000,0.125000,1.000000"
    assert text.endswith("\n")


def test_report_write_csv_uses_unix_newlines(tmp_path):
    report = TrainReport(epochs=[EpochStats(1, 1.0, 0.5, 1.0, 0.5)])
    path = tmp_path / "metrics.csv"
    report.write_csv(path)
    raw = path.read_bytes()
    assert b"\r" not in raw
    assert raw.decode() == report.to_csv_text()
