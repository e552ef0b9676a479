import math

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from enko.autodiff import Node
from enko.data import simulate
from enko.distributions import Rng, StudentT
from enko.models import (LinearGaussianSSM, NeuralSSM, NonlinearStudentSSM, build_model, kalman_filter,
                         kalman_loglik, simulate_arrays)

from conftest import random_lgssm


def _dense_joint(model, T):
    """Mean and covariance of x_{1:T} built directly from the state recursion."""
    n = model.named()
    A, H = n["A_f"], n["A_g"]
    Q, R = np.diag(np.exp(2 * n["log_sigma_f"])), np.diag(np.exp(2 * n["log_sigma_g"]))
    d_z, d_x = A.shape[0], H.shape[0]
    means, var = [n["mu_f1"]], [np.diag(np.exp(2 * n["log_sigma_f1"]))]
    for _ in range(1, T):
        means.append(A @ means[-1])
        var.append(A @ var[-1] @ A.T + Q)
    Cz = np.zeros((T * d_z, T * d_z))
    for s in range(T):
        for t in range(s, T):
            block = np.linalg.matrix_power(A, t - s) @ var[s]
            Cz[t * d_z:(t + 1) * d_z, s * d_z:(s + 1) * d_z] = block
            Cz[s * d_z:(s + 1) * d_z, t * d_z:(t + 1) * d_z] = block.T
    Hb = np.kron(np.eye(T), H)
    return Hb @ np.concatenate(means), Hb @ Cz @ Hb.T + np.kron(np.eye(T), R)


# -------------------------------------------------------------- simulate

def test_noiseless_fixed_point():
    c = np.array([0.7, -1.3])
    A_g = np.array([[1.0, 2.0], [0.5, -1.0], [3.0, 0.0]])
    m = LinearGaussianSSM.from_values(2, 3, mu_f1=c, sigma_f1=0.0, A_f=np.eye(2), sigma_f=0.0,
                                      A_g=A_g, sigma_g=0.0, sigma_q1=1.0, sigma_q=1.0)
    x, z = simulate_arrays(m, 6, 3, Rng(0))
    np.testing.assert_array_equal(x, np.broadcast_to(A_g @ c, x.shape))
    np.testing.assert_array_equal(z, np.broadcast_to(c, z.shape))


def test_initial_spread_matches_default_scale():
    m = LinearGaussianSSM.default_init(2, 2, Rng(0))
    _, z = simulate_arrays(m, 1, 10_000, Rng(1))
    s = z[:, 0].std(axis=0, ddof=1)
    assert np.all(np.abs(s - 0.1) / 0.1 < 0.05)


def test_default_init_structure():
    n = LinearGaussianSSM.default_init(3, 2, Rng(5)).named()
    for key in ("A_q", "A_f"):
        assert np.all(np.abs(n[key] - np.eye(3)) <= 0.05)
    assert np.all(np.abs(n["A_g"]) <= 0.5)
    np.testing.assert_allclose(np.exp(n["log_sigma_f1"]), 0.1)
    np.testing.assert_allclose(np.exp(n["log_sigma_g"]), 0.01)


def test_simulation_is_deterministic():
    m = random_lgssm(2, 3, 0)
    a = simulate(m, 7, 4, Rng(3))
    b = simulate(m, 7, 4, Rng(3))
    np.testing.assert_array_equal(a.sequences, b.sequences)
    np.testing.assert_array_equal(a.latents, b.latents)
    c = simulate(m, 7, 4, Rng(4))
    assert not np.array_equal(a.sequences, c.sequences)


def test_simulated_moments_follow_lyapunov_recursion():
    m = random_lgssm(2, 2, 1, sigma=0.5)
    n = m.named()
    B, T = 10_000, 5
    _, z = simulate_arrays(m, T, B, Rng(6))
    P = np.diag(np.exp(2 * n["log_sigma_f1"]))
    Q = np.diag(np.exp(2 * n["log_sigma_f"]))
    for t in range(T):
        if t:
            P = n["A_f"] @ P @ n["A_f"].T + Q
        C = np.cov(z[:, t].T)
        se = np.sqrt((np.outer(np.diag(P), np.diag(P)) + P ** 2) / B)
        assert np.all(np.abs(C - P) < 4 * se)
        assert np.all(np.abs(z[:, t].mean(0)) < 4 * np.sqrt(np.diag(P) / B))


def test_simulate_rejects_empty():
    with pytest.raises(ValueError):
        simulate_arrays(random_lgssm(1, 1, 0), 0, 1, Rng(0))


# -------------------------------------------------------- Kalman oracle

def test_kalman_scalar_example():
    m = LinearGaussianSSM.from_values(1, 1, mu_f1=[0.0], sigma_f1=1.0, A_f=[[1.0]], sigma_f=1.0,
                                      A_g=[[1.0]], sigma_g=1.0, sigma_q1=1.0, sigma_q=1.0)
    assert kalman_loglik(m, np.zeros((1, 1))) == pytest.approx(-0.5 * math.log(4 * math.pi), abs=1e-12)
    assert kalman_loglik(m, np.zeros((1, 1))) == pytest.approx(-1.26551, abs=1e-5)


def test_kalman_single_step_marginal():
    m = random_lgssm(3, 2, 2, sigma=0.7)
    n = m.named()
    x1 = np.array([0.4, -0.9])
    cov = n["A_g"] @ np.diag(np.exp(2 * n["log_sigma_f1"])) @ n["A_g"].T + np.diag(np.exp(2 * n["log_sigma_g"]))
    ref = multivariate_normal(n["A_g"] @ n["mu_f1"], cov).logpdf(x1)
    assert kalman_loglik(m, x1[None]) == pytest.approx(ref, abs=1e-12)


@pytest.mark.parametrize("d_z,d_x,seed", [(1, 1, 0), (2, 3, 1), (3, 2, 2)])
def test_kalman_matches_dense_joint(d_z, d_x, seed):
    m = random_lgssm(d_z, d_x, seed, sigma=0.8)
    n = m.named()
    n["mu_f1"] = np.linspace(-0.5, 0.5, d_z)
    m = m.with_params(m.layout.flatten(n))
    T = 3
    x = np.random.default_rng(seed).normal(size=(T, d_x))
    mean, cov = _dense_joint(m, T)
    ref = multivariate_normal(mean, cov).logpdf(x.reshape(-1))
    assert abs(kalman_loglik(m, x) - ref) < 1e-10


def test_kalman_permutation_equivariance():
    m = random_lgssm(3, 2, 3)
    n = m.named()
    n["log_sigma_f"] = np.log([0.5, 0.8, 1.3])
    n["log_sigma_f1"] = np.log([1.1, 0.6, 0.9])
    n["mu_f1"] = np.array([0.2, -0.4, 1.0])
    m = m.with_params(m.layout.flatten(n))
    perm = np.array([2, 0, 1])
    Pm = np.eye(3)[perm]
    q = dict(n)
    q["A_f"] = Pm @ n["A_f"] @ Pm.T
    q["A_g"] = n["A_g"] @ Pm.T
    for key in ("mu_f1", "log_sigma_f1", "log_sigma_f"):
        q[key] = n[key][perm]
    mp = m.with_params(m.layout.flatten(q))
    x = np.random.default_rng(4).normal(size=(6, 2))
    assert kalman_loglik(mp, x) == pytest.approx(kalman_loglik(m, x), abs=1e-10)


def test_kalman_filter_predictive_consistency():
    m = random_lgssm(2, 2, 5)
    x = np.random.default_rng(6).normal(size=(4, 2))
    _, _, px, pc = kalman_filter(m, x)
    # chain rule: log p(x_{1:4}) = log p(x_{1:3}) + log N(x_4; predictive)
    inc = multivariate_normal(px[2], pc[2]).logpdf(x[3])
    assert kalman_loglik(m, x) == pytest.approx(kalman_loglik(m, x[:3]) + inc, abs=1e-10)


# ------------------------------------------------------- other families

def test_nonlinear_mean_map():
    m = NonlinearStudentSSM.default_init(2, 3, Rng(7))
    n = m.named()
    z = np.array([[0.3, -0.8], [1.2, 0.4]])
    p = m.unpack()
    em = m.emission_dist(p, Node(z))
    assert isinstance(em, StudentT)
    feats = np.einsum("bi,bj->bij", z, z).reshape(2, 4)
    ref = np.tanh(feats @ n["C_g"].T + z @ n["A_g"].T + n["b_g"])
    np.testing.assert_allclose(em.mean.value, ref, rtol=1e-14)
    tr = m.transition_dist(p, [Node(z)])
    ref_f = np.tanh(feats @ n["C_f"].T + z @ n["A_f"].T + n["b_f"])
    np.testing.assert_allclose(tr.mean.value, ref_f, rtol=1e-14)


def test_neural_shapes_and_rebuild():
    m = NeuralSSM.initialize(2, 3, 8, Rng(8))
    x = np.random.default_rng(9).normal(size=(4, 5, 3))
    p = m.unpack()
    q1 = m.proposal_initial(p, x)
    z = q1.rsample(Rng(1), (4, 6, 2))
    assert z.shape == (4, 6, 2)
    q = m.proposal_dist(p, [z], x, 1)
    assert q.mean.shape == (4, 6, 2)
    assert m.emission_dist(p, z).mean.shape == (4, 6, 3)
    np.testing.assert_allclose(m.emission_dist(p, z).std.value, 0.1)
    rebuilt = build_model(m.config(), m.params)
    assert type(rebuilt) is NeuralSSM and rebuilt.hidden == 8
    np.testing.assert_array_equal(rebuilt.params, m.params)


def test_build_model_roundtrip_and_errors():
    for m in (random_lgssm(2, 1, 0), NonlinearStudentSSM.default_init(2, 2, Rng(0), df=7.0)):
        r = build_model(m.config(), m.params)
        assert r.config() == m.config()
        np.testing.assert_array_equal(r.params, m.params)
    with pytest.raises(ValueError):
        build_model({"kind": "gru", "d_z": 1, "d_x": 1})
    with pytest.raises(ValueError):
        LinearGaussianSSM(2, 2, np.zeros(3))


def test_bootstrap_sets_proposal_to_prior():
    n = random_lgssm(2, 2, 3).bootstrap().named()
    np.testing.assert_array_equal(n["A_q"], n["A_f"])
    np.testing.assert_array_equal(n["log_sigma_q"], n["log_sigma_f"])
    np.testing.assert_array_equal(n["mu_q1"], n["mu_f1"])
