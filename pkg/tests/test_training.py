import math

import numpy as np
import pytest

from enko.data import simulate
from enko.distributions import Rng
from enko.filters import InflationConfig
from enko.models import LinearGaussianSSM, kalman_filter
from enko.objectives import ObjectiveKind, evaluate
from enko.training import (AdamState, SweepRow, TrainConfig, adam_step, apply_axis, predict_mse, select_best,
                           sweep, train)

from conftest import random_lgssm, scalar_lgssm


# ------------------------------------------------------------------ Adam

def test_adam_zero_gradient_keeps_params_and_decays_moments():
    p = np.array([1.0, -2.0])
    st = AdamState(np.array([0.5, 0.1]), np.array([0.2, 0.3]), step=3)
    new, st2 = adam_step(p, np.zeros(2), st, 1e-3)
    np.testing.assert_allclose(st2.m, 0.9 * st.m)
    np.testing.assert_allclose(st2.v, 0.999 * st.v)
    assert st2.step == 4
    fresh, _ = adam_step(p, np.zeros(2), AdamState.zeros_like(p), 1e-3)
    np.testing.assert_array_equal(fresh, p)


@pytest.mark.parametrize("g", [3.0, -0.02, 1e-5])
def test_adam_first_step_magnitude(g):
    new, _ = adam_step(np.array([0.0]), np.array([g]), AdamState.zeros_like(np.zeros(1)), 1e-3)
    expected = 1e-3 * abs(g) / (abs(g) + 1e-8)
    assert abs(new[0]) == pytest.approx(expected, rel=1e-12)
    assert np.sign(new[0]) == -np.sign(g)


def test_adam_two_identical_steps_closed_form():
    g, lr, b1, b2, eps = 0.7, 0.01, 0.9, 0.999, 1e-8
    p1, st = adam_step(np.array([0.0]), np.array([g]), AdamState.zeros_like(np.zeros(1)), lr)
    p2, _ = adam_step(p1, np.array([g]), st, lr)
    m2 = (1 - b1) * g * (1 + b1)
    v2 = (1 - b2) * g * g * (1 + b2)
    step2 = lr * (m2 / (1 - b1 ** 2)) / (math.sqrt(v2 / (1 - b2 ** 2)) + eps)
    assert abs(p2[0] - p1[0]) == pytest.approx(step2, rel=1e-12)
    assert abs(p2[0] - p1[0]) <= abs(p1[0]) + 1e-15


def test_adam_shape_contract_and_purity():
    p, g = np.ones(3), np.ones(3)
    st = AdamState.zeros_like(p)
    adam_step(p, g, st, 0.1)
    np.testing.assert_array_equal(p, 1.0)
    assert st.step == 0
    with pytest.raises(ValueError):
        adam_step(p, np.ones(2), st, 0.1)


# -------------------------------------------------------------- training

def _teacher_data(seed=0, n=(30, 10, 10), T=8):
    teacher = scalar_lgssm()
    return teacher, simulate(teacher, T, sum(n), Rng(seed), splits=n)


def test_train_zero_epochs_returns_initialization():
    _, data = _teacher_data()
    student = random_lgssm(1, 1, 3)
    model, hist = train(student, data, TrainConfig(ObjectiveKind("enko", 4), epochs=0))
    assert hist == []
    np.testing.assert_array_equal(model.params, student.params)


def test_train_is_deterministic_and_keeps_best_validation():
    _, data = _teacher_data()
    student = random_lgssm(1, 1, 3)
    cfg = TrainConfig(ObjectiveKind("fivo", 4), learning_rate=0.02, epochs=4, batch_size=10, seed=5)
    m1, h1 = train(student, data, cfg)
    m2, h2 = train(student, data, cfg)
    assert h1 == h2
    np.testing.assert_array_equal(m1.params, m2.params)
    assert [r.epoch for r in h1] == [1, 2, 3, 4]
    valid_kind = ObjectiveKind("fivo", 4)
    score = evaluate(m1, data.split("valid"), valid_kind, Rng(5).child("valid"), diagnostics=False)
    best = max(r.valid_objective for r in h1)
    init = evaluate(student, data.split("valid"), valid_kind, Rng(5).child("valid"), diagnostics=False)
    per_step = float(score.value.value) / data.T
    assert per_step == pytest.approx(max(best, float(init.value.value) / data.T), abs=1e-12)


def test_train_improves_objective_on_teacher_data():
    _, data = _teacher_data(n=(40, 10, 10))
    student = random_lgssm(1, 1, 4)
    cfg = TrainConfig(ObjectiveKind("iwae", 8), learning_rate=0.05, epochs=15, batch_size=10, seed=1)
    _, hist = train(student, data, cfg)
    assert hist[-1].valid_objective > hist[0].valid_objective
    assert all(math.isfinite(r.train_objective) and r.status == "ok" for r in hist)


def test_non_finite_epoch_is_rolled_back():
    teacher, data = _teacher_data()
    data.sequences[data.splits["train"][0], 2, 0] = np.nan
    for kind, status in (("iwae", "nan"), ("enko", "degenerate")):
        cfg = TrainConfig(ObjectiveKind(kind, 4), learning_rate=0.05, epochs=2, batch_size=100)
        model, hist = train(teacher, data, cfg)
        assert [r.status for r in hist] == [status, status]
        np.testing.assert_array_equal(model.params, teacher.params)


def test_train_config_contracts():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=-1)


# ------------------------------------------------------------ prediction

def test_predict_mse_zero_noise_fixed_dynamics():
    c = np.array([0.6, -0.9])
    A_g = np.array([[1.0, 0.5], [-0.4, 2.0]])
    tiny = 1e-7
    m = LinearGaussianSSM.from_values(2, 2, mu_q1=c, sigma_q1=tiny, A_q=np.eye(2), sigma_q=tiny,
                                      mu_f1=c, sigma_f1=tiny, A_f=np.eye(2), sigma_f=tiny,
                                      A_g=A_g, sigma_g=tiny)
    x = np.broadcast_to(A_g @ c, (5, 12, 2)).copy()
    for kind in ("enko", "fivo", "iwae"):
        res = predict_mse(m, x, ObjectiveKind(kind, 4), 6, [1, 3, 6], Rng(0))
        assert np.all(res.mse < 1e-10)


def test_predict_mse_matches_kalman_predictive_variance():
    m = scalar_lgssm()
    B, T, c = 1000, 6, 5
    data = simulate(m, T, B, Rng(1))
    _, _, _, pc = kalman_filter(m, data.sequences[0])
    res = predict_mse(m, data.sequences, ObjectiveKind("enko", 200), c, [1], Rng(2))
    assert res.mse[0] == pytest.approx(pc[c - 1][0, 0], rel=0.10)


def test_predict_mse_shuffle_invariance():
    m = random_lgssm(2, 2, 5)
    x = simulate(m, 10, 400, Rng(3)).sequences
    kind = ObjectiveKind("enko", 32)
    a = predict_mse(m, x, kind, 6, [1, 4], Rng(4))
    perm = np.random.default_rng(0).permutation(len(x))
    b = predict_mse(m, x[perm], kind, 6, [1, 4], Rng(4))
    se = np.hypot(a.stderr, b.stderr)
    assert np.all(np.abs(a.mse - b.mse) < 3 * se)
    c = predict_mse(m, x, kind, 6, [4, 1, 1], Rng(4))
    np.testing.assert_array_equal(c.mse, a.mse)


def test_true_model_beats_random_model_at_horizon_one():
    teacher = random_lgssm(2, 2, 6, sigma=0.5)
    other = LinearGaussianSSM.default_init(2, 2, Rng(7))
    x = simulate(teacher, 8, 1000, Rng(8)).sequences
    kind = ObjectiveKind("enko", 16)
    good = predict_mse(teacher, x, kind, 7, [1], Rng(9)).per_sequence[:, 0]
    bad = predict_mse(other, x, kind, 7, [1], Rng(9)).per_sequence[:, 0]
    g = np.random.default_rng(1)
    boots = [np.mean(bad[i] - good[i]) for i in (g.integers(0, 1000, 1000) for _ in range(2000))]
    assert np.quantile(boots, 0.01) > 0


def test_predict_mse_contracts():
    m = scalar_lgssm()
    x = np.zeros((2, 5, 1))
    with pytest.raises(ValueError):
        predict_mse(m, x, ObjectiveKind("enko", 4), 4, [2], Rng(0))
    with pytest.raises(ValueError):
        predict_mse(m, x, ObjectiveKind("enko", 4), 2, [0], Rng(0))


# ----------------------------------------------------------------- sweep

def _sweep_setup():
    _, data = _teacher_data(n=(20, 10, 0), T=8)
    base = TrainConfig(ObjectiveKind("enko", 4, inflation=InflationConfig("rtpp", 0.1)),
                       learning_rate=0.02, epochs=2, batch_size=10, seed=3)
    return data, base, (lambda seed: random_lgssm(1, 1, seed))


def test_sweep_single_value_equals_direct_run():
    data, base, factory = _sweep_setup()
    rows = sweep("inflation_factor", [0.2], base, data, factory, 5, [1, 2])
    cfg = apply_axis(base, "inflation_factor", 0.2)
    model, _ = train(factory(cfg.seed), data, cfg)
    direct = predict_mse(model, data.split("valid"), cfg.objective, 5, [1, 2], Rng(cfg.seed).child("eval"))
    assert len(rows) == 1 and rows[0].status == "ok"
    np.testing.assert_array_equal(rows[0].mse, direct.mse)


def test_sweep_order_invariance_and_particles_axis():
    data, base, factory = _sweep_setup()
    a = sweep("n_particles", [3, 5], base, data, factory, 5, [1])
    b = sweep("n_particles", [5, 3], base, data, factory, 5, [1])
    np.testing.assert_array_equal(a[0].mse, b[1].mse)
    np.testing.assert_array_equal(a[1].mse, b[0].mse)
    assert [r.value for r in a] == [3.0, 5.0]


def test_sweep_records_failing_cell_and_continues():
    data, base, factory = _sweep_setup()
    rows = sweep("n_particles", [1, 3], base, data, factory, 5, [1])
    assert rows[0].status.startswith("error") and rows[1].status == "ok"
    with pytest.raises(ValueError):
        sweep("n_particles", [], base, data, factory, 5, [1])
    with pytest.raises(ValueError):
        apply_axis(base, "learning_rate", 0.1)


def test_select_best_is_argmin():
    rows = [SweepRow(0.1, np.array([2.0]), 0.0), SweepRow(0.2, np.array([1.5]), 0.0),
            SweepRow(0.3, np.array([1.8]), 0.0)]
    assert select_best(rows).value == 0.2
    assert select_best(rows[::-1]).value == 0.2
    with pytest.raises(ValueError):
        select_best([SweepRow(0.1, np.array([np.nan]), 0.0)])
