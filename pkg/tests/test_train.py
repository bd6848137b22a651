"""Training recipe: loss values, optimizer recurrences, schedule
boundaries, SWA, metrics, and end-to-end toy learning."""

import numpy as np
import pytest

from tilemamba import tensor as T
from tilemamba import train as TR
from tilemamba.errors import ConfigError, ContractError
from tilemamba.model import ModelConfig, build_model
from tilemamba.tensor import RngStream, Tensor


# -- bce ------------------------------------------------------------------------


def test_bce_uniform_prediction():
    logits = Tensor(np.zeros((1, 2), dtype=np.float64))
    assert TR.bce_loss(logits, np.array([1])).item() == pytest.approx(
        0.6931471805599453, abs=1e-12)


def test_bce_hand_value_batch_of_two():
    z = np.log(9.0)   # softmax positive prob 0.9
    logits = Tensor(np.array([[0.0, z], [z, 0.0]], dtype=np.float64))
    loss = TR.bce_loss(logits, np.array([1, 0])).item()
    assert loss == pytest.approx(-np.log(0.9), abs=1e-9)
    assert loss == pytest.approx(0.105361, abs=1e-6)


def test_bce_clamp_floor_on_perfect_predictions():
    logits = Tensor(np.array([[-60.0, 60.0], [60.0, -60.0]], dtype=np.float64))
    loss = TR.bce_loss(logits, np.array([1, 0])).item()
    assert 0.0 < loss <= 1.7e-7


def test_bce_rejects_bad_targets():
    logits = Tensor(np.zeros((2, 2)))
    with pytest.raises(ContractError):
        TR.bce_loss(logits, np.array([0, 2]))
    with pytest.raises(ContractError):
        TR.bce_loss(Tensor(np.zeros((2, 3))), np.array([0, 1]))


def test_bce_gradcheck():
    rng = RngStream(0)
    logits = Tensor(rng.normal((6, 2)), requires_grad=True)
    targets = np.array([0, 1, 1, 0, 1, 0])
    assert T.finite_diff_gradcheck(
        lambda v: TR.bce_loss(v, targets), logits) <= 1e-6


# -- sgd momentum ------------------------------------------------------------------


def test_sgd_momentum_two_step_recurrence():
    w = Tensor(np.zeros(1), requires_grad=True)
    opt = TR.init_optimizer("sgd", momentum=0.9)
    w.grad = np.ones(1)
    TR.sgd_momentum_step(opt, [("w", w)], 0.1)
    assert w.data[0] == pytest.approx(-0.1)
    w.grad = np.ones(1)
    TR.sgd_momentum_step(opt, [("w", w)], 0.1)
    assert opt.velocities["w"][0] == pytest.approx(1.9)
    assert w.data[0] == pytest.approx(-0.29)


def test_sgd_zero_lr_leaves_parameters_bit_unchanged():
    rng = RngStream(1)
    params = [(f"p{i}", Tensor(rng.normal((3, 3)), requires_grad=True))
              for i in range(3)]
    before = [p.data.copy() for _, p in params]
    opt = TR.init_optimizer("sgd")
    for _, p in params:
        p.grad = rng.normal((3, 3))
    TR.sgd_momentum_step(opt, params, 0.0)
    for (_, p), snap in zip(params, before):
        assert np.array_equal(p.data, snap)


def test_fixed_tensors_never_touched():
    fixed = Tensor(np.ones((4, 2)), requires_grad=False)
    opt = TR.init_optimizer("sgd")
    for _ in range(100):
        TR.sgd_momentum_step(opt, [("w_fixed", fixed)], 1.0)
    assert np.array_equal(fixed.data, np.ones((4, 2)))
    assert not opt.velocities


def test_adam_and_adamw_available_for_sweeps():
    for kind in ("adam", "adamw"):
        w = Tensor(np.ones(2), requires_grad=True)
        opt = TR.init_optimizer(kind)
        w.grad = np.full(2, 0.5)
        TR.optimizer_step(opt, [("w", w)], 1e-2)
        assert not np.array_equal(w.data, np.ones(2))
    with pytest.raises(ConfigError):
        TR.init_optimizer("rmsprop")


# -- onecycle ----------------------------------------------------------------------


def test_onecycle_boundary_values():
    s = TR.ScheduleConfig(total_steps=200, max_lr=1e-3)
    assert TR.onecycle_lr(s, 0) == pytest.approx(1e-3 / 25)
    assert TR.onecycle_lr(s, 60) == pytest.approx(1e-3)   # pct_start * total
    assert TR.onecycle_lr(s, 200) == pytest.approx(1e-3 / 1e4)


def test_onecycle_step_out_of_range():
    s = TR.ScheduleConfig(total_steps=10, max_lr=1.0)
    with pytest.raises(ContractError):
        TR.onecycle_lr(s, 11)
    with pytest.raises(ContractError):
        TR.onecycle_lr(s, -1)


def test_onecycle_continuity():
    """Steps never jump more than the cosine-schedule slope bound
    pi/(2*min(pct, 1-pct)) * max_lr / total."""
    s = TR.ScheduleConfig(total_steps=500, max_lr=2e-3)
    bound = np.pi / (2 * min(s.pct_start, 1 - s.pct_start)) * s.max_lr / s.total_steps
    lrs = [TR.onecycle_lr(s, k) for k in range(501)]
    deltas = np.abs(np.diff(lrs))
    assert deltas.max() <= bound * 1.0001
    assert lrs[150] == max(lrs)


def test_onecycle_config_validation():
    with pytest.raises(ConfigError):
        TR.onecycle_lr(TR.ScheduleConfig(total_steps=10, max_lr=1.0,
                                         pct_start=1.5), 0)
    with pytest.raises(ConfigError):
        TR.onecycle_lr(TR.ScheduleConfig(total_steps=10, max_lr=1.0,
                                         div_factor=0.5), 0)


# -- swa -----------------------------------------------------------------------------


def _toy_model():
    cfg = ModelConfig(image_size=32)
    return build_model(cfg, RngStream(0)), cfg


def test_swa_average_of_identical_snapshots_is_identity():
    model, _ = _toy_model()
    s = TR.SWAState(start_epoch=1)
    TR.swa_update(s, model)
    TR.swa_update(s, model)
    avg = TR.swa_finalize(s)
    for name, p in model.trainable_parameters():
        assert np.allclose(avg[name], p.data)


def test_swa_arithmetic_mean():
    model, _ = _toy_model()
    name0, p0 = next(model.trainable_parameters())
    s = TR.SWAState(start_epoch=1)
    p0.data[:] = 0.0
    TR.swa_update(s, model)
    p0.data[:] = 2.0
    TR.swa_update(s, model)
    assert np.allclose(TR.swa_finalize(s)[name0], 1.0)


def test_swa_matches_stored_snapshots():
    # f64 model: the 1e-7 bound is about the accumulation math, and f32
    # storage alone rounds at 1.2e-7
    model = build_model(ModelConfig(image_size=32), RngStream(0),
                        dtype=np.float64)
    rng = RngStream(3)
    s = TR.SWAState(start_epoch=1)
    snaps = []
    for _ in range(5):
        for _, p in model.trainable_parameters():
            p.data += rng.normal(p.data.shape, 0.1).astype(p.data.dtype)
        snaps.append({n: p.data.copy() for n, p in model.trainable_parameters()})
        TR.swa_update(s, model)
    avg = TR.swa_finalize(s)
    for name in avg:
        stacked = np.mean([snap[name] for snap in snaps], axis=0)
        assert np.abs(avg[name] - stacked).max() <= 1e-7


def test_swa_finalize_without_updates_rejected():
    with pytest.raises(ContractError):
        TR.swa_finalize(TR.SWAState(start_epoch=1))


# -- metrics -----------------------------------------------------------------------------


def test_metrics_hand_counts():
    r = TR.MetricsReport(tp=2, fp=1, fn=1, tn=2)
    assert r.accuracy == pytest.approx(2 / 3)
    assert r.precision == pytest.approx(2 / 3)
    assert r.recall == pytest.approx(2 / 3)
    assert r.f1 == pytest.approx(2 / 3)


def test_metrics_perfect_predictions():
    r = TR.MetricsReport(tp=5, fp=0, fn=0, tn=5)
    assert (r.accuracy, r.precision, r.recall, r.f1) == (1.0, 1.0, 1.0, 1.0)


def test_metrics_table_rate_composition_cross_check():
    """Composing the reference confusion rates (0.9770 TP / 0.9667 TN) at
    10,000 samples per class gives accuracy 0.97185; the accuracy formula
    must reproduce it from raw counts."""
    tp, fn = 9770, 230
    fp, tn = 333, 9667
    r = TR.MetricsReport(tp=tp, fp=fp, fn=fn, tn=tn)
    assert r.accuracy == pytest.approx((9770 + 9667) / 20000)
    assert r.accuracy == pytest.approx(0.97185, abs=5e-5)
    rates = r.normalized_rates()
    assert rates[0, 0] == pytest.approx(0.9770, abs=1e-4)
    assert rates[1, 1] == pytest.approx(0.9667, abs=1e-4)


def test_metrics_rates_rows_sum_to_one():
    rng = RngStream(4)
    for _ in range(20):
        tp, fp, fn, tn = (int(v) for v in rng.integers(1, 50, (4,)))
        rates = TR.MetricsReport(tp=tp, fp=fp, fn=fn, tn=tn).normalized_rates()
        assert np.abs(rates.sum(axis=1) - 1.0).max() <= 1e-9


def test_f1_harmonic_identity_and_zero_guard():
    r = TR.MetricsReport(tp=3, fp=2, fn=1, tn=4)
    p, rec = r.precision, r.recall
    assert r.f1 == pytest.approx(2 * p * rec / (p + rec))
    assert TR.MetricsReport(tp=0, fp=0, fn=3, tn=3).f1 == 0.0


def test_evaluate_contracts():
    model, _ = _toy_model()
    with pytest.raises(ContractError):
        TR.evaluate(model, np.zeros((0, 3, 32, 32), dtype=np.float32),
                    np.zeros(0, dtype=np.int64))


def test_evaluate_counts_against_argmax():
    model, _ = _toy_model()
    rng = RngStream(5)
    images = rng.uniform((12, 3, 32, 32)).astype(np.float32)
    labels = (np.arange(12) % 2).astype(np.int64)
    report = TR.evaluate(model, images, labels, batch_size=5)
    with T.no_grad():
        logits = model.eval().forward(Tensor(images)).data
    preds = logits.argmax(axis=1)
    assert report.tp == int(((preds == 1) & (labels == 1)).sum())
    assert report.total == 12


# -- epoch loop ---------------------------------------------------------------------------


def _toy_dataset(n=48, size=32, seed=0):
    """Linearly separable toy tiles: class means 0.25 vs 0.75."""
    rng = RngStream(seed)
    labels = (np.arange(n) % 2).astype(np.int64)
    base = np.where(labels[:, None, None, None] == 0, 0.25, 0.75)
    images = base + rng.normal((n, 3, size, size), 0.02)
    return np.clip(images, 0, 1).astype(np.float32), labels


def test_train_epoch_deterministic_and_lr_trace():
    model, _ = _toy_model()
    images, labels = _toy_dataset()
    opt = TR.init_optimizer("sgd", momentum=0.9)
    sched = TR.ScheduleConfig(total_steps=6, max_lr=1e-4)
    log = TR.train_epoch(model, images, labels, opt, sched, (0.0, 0.0),
                         RngStream(9), batch_size=8, step_offset=0)
    assert log["steps"] == 6
    expected = [TR.onecycle_lr(sched, k) for k in range(6)]
    assert log["lr_trace"] == expected

    model2, _ = _toy_model()
    opt2 = TR.init_optimizer("sgd", momentum=0.9)
    log2 = TR.train_epoch(model2, images, labels, opt2, sched, (0.0, 0.0),
                          RngStream(9), batch_size=8, step_offset=0)
    assert log2["mean_loss"] == log["mean_loss"]


def test_train_epoch_empty_dataset_rejected():
    model, _ = _toy_model()
    opt = TR.init_optimizer("sgd")
    sched = TR.ScheduleConfig(total_steps=1, max_lr=1e-4)
    with pytest.raises(ContractError):
        TR.train_epoch(model, np.zeros((0, 3, 32, 32), dtype=np.float32),
                       np.zeros(0, dtype=np.int64), opt, sched, (0.0, 0.0),
                       RngStream(0), batch_size=4, step_offset=0)


def test_toy_training_loss_decreases():
    images, labels = _toy_dataset(n=64)
    model, _ = _toy_model()
    cfg = TR.TrainConfig(epochs=10, batch_size=8, max_lr=3e-4,
                         noise_salt=0.0, noise_pepper=0.0)
    splits = {"train": (images, labels), "val": (images[:16], labels[:16])}
    result = TR.fit(model, splits, cfg, seed=1, nc_trace=False)
    losses = [r["mean_loss"] for r in result["history"]]
    assert losses[-1] < losses[0]


def test_train_mode_equals_eval_mode_without_noise_or_drop_path():
    model, _ = _toy_model()
    x = Tensor(RngStream(6).uniform((3, 3, 32, 32)).astype(np.float32))
    model.train()
    with T.no_grad():
        train_out = model.forward(x, rng=RngStream(1), noise=(0.0, 0.0)).data.copy()
    model.eval()
    with T.no_grad():
        eval_out = model.forward(x).data.copy()
    assert np.array_equal(train_out, eval_out)


def test_fit_runs_swa_and_reports(tmp_path):
    images, labels = _toy_dataset(n=32)
    model, _ = _toy_model()
    cfg = TR.TrainConfig(epochs=4, batch_size=8, max_lr=1e-4,
                         swa_start_frac=0.5)
    splits = {"train": (images, labels), "val": (images[:8], labels[:8]),
              "test": (images[8:16], labels[8:16])}
    result = TR.fit(model, splits, cfg, seed=2)
    assert result["swa_count"] == 3   # epochs 2, 3, 4
    assert len(result["history"]) == 4
    assert set(result["history"][0]) == {"epoch", "mean_loss", "lr",
                                         "val_accuracy", "val_f1"}
    assert len(result["nc_trace"]) == 4
    assert "test_metrics" in result
