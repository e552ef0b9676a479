"""Gradient-variance study: repeated gradient draws at one parameter point.

The data and parameters are fixed; only the estimator noise changes between
simulations.  Each estimator reads its own RNG stream, so the order in which
estimators run does not matter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .distributions import Rng
from .models import LinearGaussianSSM, NonlinearStudentSSM, SsmModel, simulate_arrays
from .objectives import OBJECTIVE_KINDS, ObjectiveKind, value_and_grad

ESTIMATORS = ("enko", "fivo", "fivor", "iwae")


@dataclass(frozen=True)
class GradVarSpec:
    model_kind: str = "lgssm"
    d_x: int = 2
    d_z: int = 2
    T: int = 100
    n_particles: int = 16
    batch: int = 10
    n_simulations: int = 100
    seed: int = 0
    estimators: tuple = ESTIMATORS

    def __post_init__(self):
        if self.model_kind not in ("lgssm", "nonlinear_student"):
            raise ValueError(f"unknown model kind {self.model_kind!r}")
        if self.n_simulations < 2:
            raise ValueError("need at least two simulations for a variance")
        bad = [e for e in self.estimators if e not in OBJECTIVE_KINDS]
        if bad:
            raise ValueError(f"unknown estimators {bad}")


@dataclass
class VarianceReport:
    estimator: str
    groups: dict[str, float]
    config: dict = field(default_factory=dict)


def build_study_model(spec: GradVarSpec) -> SsmModel:
    rng = Rng(spec.seed).child("init")
    if spec.model_kind == "lgssm":
        return LinearGaussianSSM.default_init(spec.d_z, spec.d_x, rng)
    return NonlinearStudentSSM.default_init(spec.d_z, spec.d_x, rng)


def natural_gradient_view(model: SsmModel, grad: np.ndarray) -> dict[str, np.ndarray]:
    """Per-parameter gradients with ``log_sigma_*`` converted to ``sigma_*``."""
    named = model.named()
    out = {}
    for name, g in model.layout.unflatten(grad).items():
        if name.startswith("log_sigma"):
            out[name[4:]] = g / np.exp(named[name])
        else:
            out[name] = g
    return out


def _square_dynamics(name: str, arr: np.ndarray) -> bool:
    return arr.ndim == 2 and arr.shape[0] == arr.shape[1] and name in ("A_q", "A_f")


def aggregate_variance(per_entry: dict[str, np.ndarray]) -> dict[str, float]:
    """Average element variances: vectors and rectangular matrices over all
    entries, square transition/proposal matrices split into diag and offdiag."""
    out = {}
    for name, v in per_entry.items():
        v = np.asarray(v, dtype=np.float64)
        if _square_dynamics(name, v):
            d = v.shape[0]
            out[f"diag({name})"] = float(np.mean(np.diag(v)))
            if d > 1:
                out[f"offdiag({name})"] = float(v[~np.eye(d, dtype=bool)].mean())
        else:
            out[name] = float(v.mean())
    return out


def grad_samples(model: SsmModel, x: np.ndarray, estimator: str, n_particles: int,
                 n_simulations: int, rng: Rng) -> dict[str, np.ndarray]:
    kind = ObjectiveKind(estimator, n_particles)
    draws: dict[str, list] = {}
    for s in range(n_simulations):
        _, g = value_and_grad(model, x, kind, rng.child(s))
        for name, arr in natural_gradient_view(model, g).items():
            draws.setdefault(name, []).append(arr)
    return {k: np.stack(v) for k, v in draws.items()}


def grad_variance_experiment(spec: GradVarSpec) -> dict[str, VarianceReport]:
    model = build_study_model(spec)
    x, _ = simulate_arrays(model, spec.T, spec.batch, Rng(spec.seed).child("data"))
    config = {"model_kind": spec.model_kind, "d_x": spec.d_x, "d_z": spec.d_z, "T": spec.T,
              "N": spec.n_particles, "batch": spec.batch, "n_simulations": spec.n_simulations,
              "seed": spec.seed}
    reports = {}
    for est in spec.estimators:
        samples = grad_samples(model, x, est, spec.n_particles, spec.n_simulations,
                               Rng(spec.seed).child("grad", est))
        variances = {k: v.var(axis=0, ddof=1) for k, v in samples.items()}
        reports[est] = VarianceReport(est, aggregate_variance(variances), dict(config))
    return reports


def log_relative_variance(reports: dict[str, VarianceReport], reference: str = "fivo"):
    """``log(V_est / V_ref)`` per group; NaN when either variance is zero."""
    ref = reports[reference].groups
    out = {}
    for est, rep in reports.items():
        out[est] = {}
        for g, v in rep.groups.items():
            r = ref.get(g, math.nan)
            out[est][g] = math.log(v / r) if v > 0 and r > 0 else math.nan
    return out
