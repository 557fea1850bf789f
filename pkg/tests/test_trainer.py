import math
import warnings

import numpy as np
import pytest

from mpinfilter.data import LabeledDataset
from mpinfilter.fixedpoint.arith import FixedPointFormat, SaturationWarning
from mpinfilter.trainer import (
    TrainConfig,
    TrainingError,
    accuracy,
    compute_energies,
    evaluate,
    fit_classifier,
    forward,
    gamma_at,
    geometric_schedule,
    kink_distance,
    loss_and_grad,
    pack,
    predict,
    quantize_model,
    round_significant,
    train,
)

from oracles import central_diff


def separable(seed, n=200, P=4, margin=0.3):
    """Gaussian points labelled by a known hyperplane, with a margin gap."""
    rng = np.random.default_rng(seed)
    w = rng.normal(size=P)
    w /= np.linalg.norm(w)
    X = rng.normal(size=(4 * n, P))
    X = X[np.abs(X @ w) > margin][:n]
    return X, (X @ w > 0).astype(int)


# --- config -------------------------------------------------------------------


def test_default_schedule_anneals():
    cfg = TrainConfig(epochs=10)
    gs = [g for _, g in cfg.gamma1_schedule]
    assert gs[0] == pytest.approx(2.0) and gs[-1] == pytest.approx(0.5)
    assert all(b <= a for a, b in zip(gs, gs[1:]))
    assert cfg.final_gamma1 == pytest.approx(0.5)
    assert geometric_schedule(2.0, 0.5, 1) == [(0, 0.5)]


def test_gamma_at_holds_last_value():
    sched = ((0, 2.0), (5, 1.0), (9, 0.5))
    assert [gamma_at(sched, e) for e in (0, 4, 5, 8, 9, 50)] == [2.0, 2.0, 1.0, 1.0, 0.5, 0.5]


@pytest.mark.parametrize(
    "kwargs",
    [
        {"epochs": 0},
        {"batch_size": 0},
        {"learning_rate": 0.0},
        {"gamma1_schedule": ((0, 0.5), (3, 1.0))},
        {"gamma1_schedule": ((0, -1.0),)},
        {"gamma1_schedule": ((3, 1.0), (3, 0.5))},
        {"gamma1_schedule": ()},
        {"bits": 1},
        {"feature_mode": "fixed"},
    ],
)
def test_config_validation(kwargs):
    with pytest.raises(TrainingError):
        TrainConfig(**kwargs)


# --- loss and gradient ----------------------------------------------------------------


def test_symmetric_init_loss_equals_constant_predictor():
    rng = np.random.default_rng(0)
    Phi = rng.normal(size=(40, 6))
    y = np.array([0, 1] * 20)
    theta = pack(np.zeros(6), np.zeros(6), 0.3, 0.3)
    assert np.all(forward(theta, Phi, 0.7) == 0)
    loss, _ = loss_and_grad(theta, Phi, y, 0.7)
    assert loss == pytest.approx(math.log(2.0), abs=1e-12)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    checked = 0
    for _ in range(100):
        P = int(rng.integers(1, 9))
        Phi = rng.normal(size=(6, P))
        y = rng.integers(0, 2, 6)
        theta = rng.normal(scale=0.5, size=2 * P + 2)
        g1 = float(rng.uniform(0.3, 2.0))
        h = 1e-6
        # finite differences are only meaningful away from MP kinks
        if kink_distance(theta, Phi, g1).min() < 1e-3:
            continue
        _, grad = loss_and_grad(theta, Phi, y, g1)
        fd = central_diff(lambda t: loss_and_grad(t, Phi, y, g1)[0], theta, h)
        scale = np.maximum(np.abs(fd), 1e-3)
        assert np.all(np.abs(grad - fd) / scale <= 1e-4)
        checked += 1
    assert checked >= 30


def test_kink_distance_zero_on_a_kink():
    # plus set {2, 0, -5} with gamma 2 solves to z = 0, exactly on a member
    theta = pack([2.0], [0.0], -5.0, 0.0)
    assert kink_distance(theta, np.zeros((1, 1)), 2.0)[0] == 0.0
    assert kink_distance(theta, np.zeros((1, 1)), 2.5)[0] > 0.0


# --- fitting ------------------------------------------------------------------------


def test_separable_set_reaches_99_percent():
    X, y = separable(0)
    res = fit_classifier(X, y, TrainConfig(epochs=200, seed=0))
    assert max(row[2] for row in res.log) >= 0.99
    # the returned parameters are those of the lowest-loss epoch
    best = res.log[res.best_epoch]
    assert accuracy(forward(res.theta, X, best[3]), y) == best[2]


def test_monotone_descent_with_small_step():
    X, y = separable(1)
    cfg = TrainConfig(epochs=40, learning_rate=0.005, momentum=0.0, batch_size=len(y), gamma1_schedule=((0, 0.5),))
    losses = [row[1] for row in fit_classifier(X, y, cfg).log]
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]


def test_reproducible_bit_for_bit():
    X, y = separable(2)
    a = fit_classifier(X, y, TrainConfig(epochs=15, seed=7))
    b = fit_classifier(X, y, TrainConfig(epochs=15, seed=7))
    assert np.array_equal(a.theta, b.theta) and a.log == b.log


def test_annealing_no_worse_than_constant_over_seeds():
    annealed, constant = [], []
    for s in range(10):
        X, y = separable(100 + s)
        a = fit_classifier(X, y, TrainConfig(epochs=60, seed=s))
        c = fit_classifier(X, y, TrainConfig(epochs=60, seed=s, gamma1_schedule=((0, a.log[-1][3]),)))
        annealed.append(a.log[-1][1])
        constant.append(c.log[-1][1])
    assert np.mean(annealed) <= np.mean(constant)


def test_training_log_csv():
    X, y = separable(3, n=40)
    text = fit_classifier(X, y, TrainConfig(epochs=3)).log_csv()
    lines = text.splitlines()
    assert lines[0] == "epoch,loss,train_acc,gamma1" and len(lines) == 4


def test_training_errors():
    with pytest.raises(TrainingError, match="empty"):
        fit_classifier(np.zeros((0, 4)), np.zeros(0), TrainConfig(epochs=1))
    Phi = np.full((4, 2), np.nan)
    with pytest.raises(TrainingError, match="non-finite kernel"):
        fit_classifier(Phi, np.array([0, 1, 0, 1]), TrainConfig(epochs=1))
    X, y = separable(4, n=20)
    with pytest.raises(TrainingError, match="non-finite loss"), np.errstate(all="ignore"):
        fit_classifier(X * 1e300, y, TrainConfig(epochs=5, learning_rate=1e300))
    with pytest.raises(TrainingError, match="parameters"):
        fit_classifier(np.zeros((4, 2)), np.array([0, 1, 0, 1]), TrainConfig(epochs=1), init=np.zeros(3))


def test_train_requires_training_clips(synth_dataset, bank):
    only_test = LabeledDataset(synth_dataset.clips, synth_dataset.labels, np.array(["test"] * 48), "low", {})
    with pytest.raises(TrainingError):
        train(only_test, bank, TrainConfig(epochs=1), energies=np.ones((48, 30)))


# --- trained model on synthetic audio ----------------------------------------------------


def test_synthetic_model_beats_majority(synth_model, synth_dataset, synth_energies):
    res = evaluate(synth_model, synth_dataset, energies=synth_energies)
    tr = synth_dataset.indices("train")
    majority = max(synth_dataset.labels[tr].mean(), 1 - synth_dataset.labels[tr].mean())
    assert res["train"] >= majority
    assert res["test"] >= 0.9
    assert synth_model.feature_mode == "mp" and synth_model.gamma1 == pytest.approx(0.5)


def test_stats_fitted_on_training_split_only(synth_model, synth_energies, synth_dataset):
    tr = synth_dataset.indices("train")
    assert np.allclose(synth_model.stats.mu, synth_energies[tr].mean(axis=0))


# --- quantization ---------------------------------------------------------------------


def test_round_significant():
    assert np.array_equal(round_significant([0.0, 1.0, -3.0], 4), [0.0, 1.0, -3.0])
    v = np.array([1234.5, 0.001234, -77.7])
    r = round_significant(v, 8)
    assert np.all(np.abs(r - v) <= np.abs(v) * 2.0**-6)


def test_quantize_16_bit_round_trip(synth_model):
    q = quantize_model(synth_model, 16)
    w = pack(synth_model.w_plus, synth_model.w_minus, synth_model.b_plus, synth_model.b_minus)
    wq = pack(q.w_plus, q.w_minus, q.b_plus, q.b_minus)
    assert np.max(np.abs(w - wq)) <= 2.0**-8 * (w.max() - w.min())
    assert q.quant is not None and q.quant.word_bits == 16


def test_quantize_fixed_format_saturates_with_warning(synth_model):
    from dataclasses import replace

    big = replace(synth_model, w_plus=synth_model.w_plus + 10.0)
    with pytest.warns(SaturationWarning):
        q = quantize_model(big, FixedPointFormat(8, 6), per_tensor=False)
    assert q.w_plus.max() <= FixedPointFormat(8, 6).max_value


def test_quantize_per_tensor_does_not_warn(synth_model):
    with warnings.catch_warnings():
        warnings.simplefilter("error", SaturationWarning)
        quantize_model(synth_model, 8)


def test_32_bit_decisions_equal_float(synth_model, synth_dataset, synth_energies):
    idx = synth_dataset.indices("test")
    q = quantize_model(synth_model, 32)
    clips = [synth_dataset.clips[i] for i in idx]
    pq = predict(q, compute_energies(clips, q.bank, "mp"))
    pf = predict(synth_model, synth_energies[idx])
    assert np.array_equal(pq > 0, pf > 0)
