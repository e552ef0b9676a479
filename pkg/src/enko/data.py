"""Synthetic datasets: FitzHugh-Nagumo, Lorenz-63 and model self-simulation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .distributions import Rng
from .models import SsmModel, simulate_arrays
from .storage import read_container, write_container

DATASET_MAGIC = b"ENKD"
SPLITS = ("train", "valid", "test")


@dataclass
class Dataset:
    """Observation sequences ``(n, T, d_x)`` with optional true latents.

    ``scale`` holds the per-channel divisor already applied to ``sequences``
    (all ones when no scaling was used).
    """

    sequences: np.ndarray
    latents: np.ndarray | None
    splits: dict[str, np.ndarray]
    scale: np.ndarray
    config: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        self.sequences = np.asarray(self.sequences, dtype=np.float64)
        if self.sequences.ndim != 3:
            raise ValueError("sequences must have shape (n, T, d_x)")
        self.splits = {k: np.asarray(v, dtype=np.int64) for k, v in self.splits.items()}
        seen = np.concatenate([v for v in self.splits.values()]) if self.splits else np.array([])
        if len(np.unique(seen)) != len(seen):
            raise ValueError("dataset splits overlap")
        if len(seen) and (seen.min() < 0 or seen.max() >= len(self.sequences)):
            raise ValueError("split index out of range")

    @property
    def n(self) -> int:
        return self.sequences.shape[0]

    @property
    def T(self) -> int:
        return self.sequences.shape[1]

    @property
    def d_x(self) -> int:
        return self.sequences.shape[2]

    @property
    def d_z(self) -> int:
        return 0 if self.latents is None else self.latents.shape[2]

    def split(self, name: str) -> np.ndarray:
        return self.sequences[self.splits[name]]

    def summary(self) -> str:
        lines = [f"generator: {self.config.get('generator', 'unknown')}",
                 f"sequences: {self.n}", f"T: {self.T}", f"d_x: {self.d_x}", f"d_z: {self.d_z}",
                 f"seed: {self.seed}"]
        lines += [f"split.{k}: {len(v)}" for k, v in self.splits.items()]
        lines.append("scale: " + " ".join(repr(float(s)) for s in self.scale))
        return "\n".join(lines) + "\n"

    # -- persistence
    def save(self, path) -> None:
        arrays = {"sequences": self.sequences, "scale": self.scale}
        if self.latents is not None:
            arrays["latents"] = self.latents
        for k, v in self.splits.items():
            arrays["split." + k] = v
        meta = {"config": self.config, "seed": int(self.seed), "n": self.n, "T": self.T,
                "d_x": self.d_x, "d_z": self.d_z, "splits": list(self.splits)}
        write_container(path, DATASET_MAGIC, meta, arrays)

    @classmethod
    def load(cls, path) -> "Dataset":
        meta, arrays = read_container(path, DATASET_MAGIC)
        splits = {k: arrays["split." + k] for k in meta["splits"]}
        return cls(arrays["sequences"], arrays.get("latents"), splits, arrays["scale"],
                   meta["config"], meta["seed"])

    def to_csv(self, path) -> None:
        """Long format: sequence, split, t, x_0..x_{d_x-1}."""
        label = np.full(self.n, "", dtype=object)
        for k, idx in self.splits.items():
            label[idx] = k
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sequence", "split", "t"] + [f"x_{j}" for j in range(self.d_x)])
            for i in range(self.n):
                for t in range(self.T):
                    w.writerow([i, label[i], t] + [repr(float(v)) for v in self.sequences[i, t]])


def _contiguous_splits(sizes) -> dict[str, np.ndarray]:
    out, start = {}, 0
    for name, size in zip(SPLITS, sizes):
        out[name] = np.arange(start, start + size)
        start += size
    return out


def _abs_div_scale(x: np.ndarray, train_idx: np.ndarray) -> np.ndarray:
    peak = np.abs(x[train_idx]).max(axis=(0, 1))
    return np.where(peak > 0, peak, 1.0)


# ------------------------------------------------------------ integrators

def rk4_step(f, s: np.ndarray, dt: float) -> np.ndarray:
    k1 = f(s)
    k2 = f(s + 0.5 * dt * k1)
    k3 = f(s + 0.5 * dt * k2)
    k4 = f(s + dt * k3)
    return s + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def integrate(f, s0: np.ndarray, T: int, dt: float) -> np.ndarray:
    """States at ``t = 0, dt, ..., (T-1) dt``; ``s0`` is ``(n, d)``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    out = np.empty((s0.shape[0], T, s0.shape[1]))
    s = np.array(s0, dtype=np.float64)
    for t in range(T):
        out[:, t] = s
        s = rk4_step(f, s, dt)
    return out


def fhn_rhs(s: np.ndarray, a=0.7, b=0.8, c=0.08, d=0.0, i_ext=0.0) -> np.ndarray:
    V, W = s[..., 0], s[..., 1]
    return np.stack([V - V ** 3 / 3.0 - W + i_ext, a * (b * V + d - c * W)], axis=-1)


def lorenz_rhs(s: np.ndarray, sigma=10.0, rho=28.0, beta=8.0 / 3.0) -> np.ndarray:
    x, y, z = s[..., 0], s[..., 1], s[..., 2]
    return np.stack([sigma * (y - x), x * (rho - z) - y, x * y - beta * z], axis=-1)


def _observe(latents, obs_std, rng, channels=None):
    mean = latents if channels is None else latents[..., channels]
    return mean + obs_std * rng.normal(mean.shape)


def _finish(latents, x, splits, scale_obs, config, seed) -> Dataset:
    scale = _abs_div_scale(x, splits["train"]) if scale_obs else np.ones(x.shape[-1])
    return Dataset(x / scale, latents, splits, scale, config, seed)


def fhn_generate(n_samples=400, T=40, dt=0.25, obs_std=0.1, seed=0,
                 splits=(200, 40, 160), scale=True) -> Dataset:
    """FitzHugh-Nagumo sequences; the observation is the noisy membrane potential."""
    if sum(splits) != n_samples:
        raise ValueError("split sizes must add up to n_samples")
    rng = Rng(seed)
    s0 = rng.child("init").generator.uniform(-3.0, 3.0, (n_samples, 2))
    z = integrate(fhn_rhs, s0, T, dt)
    x = _observe(z, obs_std, rng.child("obs"), channels=[0])
    cfg = {"generator": "fhn", "n_samples": n_samples, "T": T, "dt": dt, "obs_std": obs_std,
           "splits": list(splits), "scale": bool(scale)}
    return _finish(z, x, _contiguous_splits(splits), scale, cfg, seed)


def lorenz_generate(n_samples=100, T=80, dt=0.02, obs_std=0.1, seed=0,
                    splits=(66, 17, 17), scale=True) -> Dataset:
    """Lorenz-63 sequences with all three coordinates observed."""
    if sum(splits) != n_samples:
        raise ValueError("split sizes must add up to n_samples")
    rng = Rng(seed)
    s0 = rng.child("init").generator.uniform(-10.0, 10.0, (n_samples, 3))
    z = integrate(lorenz_rhs, s0, T, dt)
    x = _observe(z, obs_std, rng.child("obs"))
    cfg = {"generator": "lorenz", "n_samples": n_samples, "T": T, "dt": dt, "obs_std": obs_std,
           "splits": list(splits), "scale": bool(scale)}
    return _finish(z, x, _contiguous_splits(splits), scale, cfg, seed)


def simulate(model: SsmModel, T: int, B: int, rng: Rng, splits=None, seed: int = 0) -> Dataset:
    """Ancestral samples from ``model`` wrapped as an unscaled dataset."""
    x, z = simulate_arrays(model, T, B, rng)
    splits = splits or (B, 0, 0)
    if sum(splits) != B:
        raise ValueError("split sizes must add up to B")
    cfg = {"generator": model.kind, "T": T, "n_samples": B, "splits": list(splits),
           "model": model.config()}
    return Dataset(x, z, _contiguous_splits(splits), np.ones(model.d_x), cfg, seed)
