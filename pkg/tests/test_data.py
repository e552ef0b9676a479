import math

import numpy as np
import pytest

from enko.data import (Dataset, fhn_generate, fhn_rhs, integrate, lorenz_generate, lorenz_rhs, rk4_step,
                       simulate)
from enko.distributions import Rng
from enko.storage import ContainerError

from conftest import random_lgssm


def _euler(f, s, h, n):
    s = np.array(s, dtype=np.float64)
    for _ in range(n):
        s = s + h * f(s)
    return s


def _fhn_euler_tail_peak(v, w, h, t_end, t_tail):
    """Max |V| over the final ``t_tail`` time units of a scalar Euler run."""
    peak, n, start = 0.0, int(round(t_end / h)), int(round((t_end - t_tail) / h))
    for k in range(n):
        v, w = v + h * (v - v ** 3 / 3.0 - w), w + h * 0.7 * (0.8 * v - 0.08 * w)
        if k >= start:
            peak = max(peak, abs(v))
    return peak


# ------------------------------------------------------------------ FHN

def test_fhn_origin_is_fixed():
    traj = integrate(fhn_rhs, np.zeros((1, 2)), 200, 0.25)
    np.testing.assert_array_equal(traj, 0.0)


def test_fhn_converges_to_limit_cycle():
    t_end, t_tail, dt = 80.0, 20.0, 0.01
    traj = integrate(fhn_rhs, np.array([[2.0, 0.0]]), int(t_end / dt) + 1, dt)[0]
    tail = traj[-int(t_tail / dt):, 0]
    amp = np.abs(tail).max()
    assert 1.5 <= amp <= 2.5
    ref = _fhn_euler_tail_peak(2.0, 0.0, 1e-4, t_end, t_tail)
    assert abs(amp - ref) < 1e-2


def test_fhn_defaults_and_shapes():
    ds = fhn_generate()
    assert ds.n == 400 and ds.d_x == 1 and ds.d_z == 2 and ds.T == 40
    assert {k: len(v) for k, v in ds.splits.items()} == {"train": 200, "valid": 40, "test": 160}
    assert np.abs(ds.split("train")).max() == pytest.approx(1.0)
    assert np.all(np.abs(ds.latents[:, 0]) <= 3.0)


def test_fhn_observation_noise_level():
    ds = fhn_generate(n_samples=300, splits=(300, 0, 0), obs_std=0.1, scale=False)
    resid = ds.sequences[..., 0] - ds.latents[..., 0]
    assert resid.std() == pytest.approx(0.1, rel=0.02)


def test_generators_reject_bad_arguments():
    with pytest.raises(ValueError):
        fhn_generate(dt=0.0)
    with pytest.raises(ValueError):
        lorenz_generate(dt=-0.1)
    with pytest.raises(ValueError):
        fhn_generate(n_samples=10, splits=(5, 5, 5))


# --------------------------------------------------------------- Lorenz

@pytest.mark.parametrize("sx,sy", [(1, 1), (-1, -1)])
def test_lorenz_fixed_points(sx, sy):
    c = math.sqrt(72.0)
    p = np.array([[sx * c, sy * c, 27.0]])
    np.testing.assert_allclose(lorenz_rhs(p), 0.0, atol=1e-12)
    traj = integrate(lorenz_rhs, p, 50, 0.02)
    np.testing.assert_allclose(traj, np.broadcast_to(p, traj.shape[1:])[None], atol=1e-9)


def _richardson_euler(f, s, t, h):
    """Euler at ``h`` and ``h/2`` extrapolated to remove the O(h) error term."""
    n = int(round(t / h))
    return 2 * _euler(f, s, h / 2, 2 * n) - _euler(f, s, h, n)


def test_lorenz_rk4_step_matches_fine_euler():
    s = np.array([1.0, 1.0, 1.0])
    ref = _richardson_euler(lorenz_rhs, s, 0.01, 1e-5)
    err = np.abs(rk4_step(lorenz_rhs, s, 0.01) - ref)
    # one RK4 step at dt=0.01 carries a local truncation error of about 2.2e-6 here
    assert np.all(err < 3e-6)
    half = _richardson_euler(lorenz_rhs, s, 0.005, 1e-5)
    err_half = np.abs(rk4_step(lorenz_rhs, s, 0.005) - half)
    assert np.all(err_half < 1e-7)
    assert 20 < err.max() / err_half.max() < 45  # local error scales like dt^5


def test_rk4_fourth_order_convergence():
    s0 = np.array([[1.0, 1.0, 1.0]])
    horizon = 0.2
    ref = integrate(lorenz_rhs, s0, int(horizon / 1e-4) + 1, 1e-4)[0, -1]
    errs = []
    for dt in (0.02, 0.01):
        errs.append(np.abs(integrate(lorenz_rhs, s0, int(round(horizon / dt)) + 1, dt)[0, -1] - ref).max())
    assert 10 < errs[0] / errs[1] < 22


def test_lorenz_defaults():
    ds = lorenz_generate()
    assert ds.n == 100 and ds.d_x == 3 and ds.d_z == 3 and ds.T == 80
    assert {k: len(v) for k, v in ds.splits.items()} == {"train": 66, "valid": 17, "test": 17}
    np.testing.assert_allclose(np.abs(ds.split("train")).max(axis=(0, 1)), 1.0)


@pytest.mark.parametrize("gen", [fhn_generate, lorenz_generate])
def test_generators_are_deterministic(gen):
    a, b = gen(seed=3), gen(seed=3)
    np.testing.assert_array_equal(a.sequences, b.sequences)
    np.testing.assert_array_equal(a.latents, b.latents)
    assert not np.array_equal(a.sequences, gen(seed=4).sequences)


# -------------------------------------------------------------- storage

def test_save_load_roundtrip(tmp_path):
    ds = lorenz_generate(n_samples=10, T=12, splits=(6, 2, 2), seed=2)
    path = tmp_path / "d.enkd"
    ds.save(path)
    back = Dataset.load(path)
    np.testing.assert_array_equal(back.sequences, ds.sequences)
    np.testing.assert_array_equal(back.latents, ds.latents)
    np.testing.assert_array_equal(back.scale, ds.scale)
    for k in ds.splits:
        np.testing.assert_array_equal(back.splits[k], ds.splits[k])
    assert back.config == ds.config and back.seed == ds.seed
    ds.save(tmp_path / "e.enkd")
    assert path.read_bytes() == (tmp_path / "e.enkd").read_bytes()


def test_load_rejects_foreign_file(tmp_path):
    p = tmp_path / "junk.enkd"
    p.write_bytes(b"NOPE" + b"\0" * 20)
    with pytest.raises(ContainerError):
        Dataset.load(p)
    p.write_bytes(b"EN")
    with pytest.raises(ContainerError):
        Dataset.load(p)


def test_csv_export(tmp_path):
    ds = fhn_generate(n_samples=4, T=3, splits=(2, 1, 1))
    p = tmp_path / "d.csv"
    ds.to_csv(p)
    rows = p.read_text().splitlines()
    assert rows[0] == "sequence,split,t,x_0"
    assert len(rows) == 1 + 4 * 3
    last = rows[-1].split(",")
    assert last[:3] == ["3", "test", "2"] and float(last[3]) == ds.sequences[3, 2, 0]


def test_overlapping_splits_rejected():
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 2, 1)), None, {"train": [0, 1], "valid": [1]}, np.ones(1))


def test_simulate_dataset_wrapper():
    ds = simulate(random_lgssm(2, 3, 0), 5, 4, Rng(0), splits=(2, 1, 1))
    assert ds.sequences.shape == (4, 5, 3) and ds.latents.shape == (4, 5, 2)
    np.testing.assert_array_equal(ds.scale, 1.0)
