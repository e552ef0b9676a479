"""Adam, the training loop, k-step predictive MSE and sweep drivers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .autodiff import Node
from .data import Dataset
from .distributions import Rng
from .filters import DegenerateCovarianceError, multinomial_resample
from .models import SsmModel
from .objectives import ObjectiveKind, evaluate, value_and_grad


# ------------------------------------------------------------------ Adam

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: np.ndarray, **kw) -> "AdamState":
        return cls(np.zeros_like(params), np.zeros_like(params), **kw)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState,
              lr: float) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam descent step on ``grads``; inputs are not mutated."""
    params, grads = np.asarray(params, float), np.asarray(grads, float)
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ValueError("adam_step: parameter, gradient and moment shapes differ")
    b1, b2 = state.beta1, state.beta2
    step = state.step + 1
    m = b1 * state.m + (1 - b1) * grads
    v = b2 * state.v + (1 - b2) * grads * grads
    m_hat = m / (1 - b1 ** step)
    v_hat = v / (1 - b2 ** step)
    new = params - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, replace(state, m=m, v=v, step=step)


# -------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainConfig:
    objective: ObjectiveKind = field(default_factory=ObjectiveKind)
    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: int = 20
    seed: int = 0
    grad_clip_norm: float | None = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class EpochRecord:
    epoch: int
    train_objective: float
    valid_objective: float
    grad_norm: float
    mean_ess: float
    status: str = "ok"


HISTORY_COLUMNS = ("epoch", "train_objective", "valid_objective", "grad_norm", "mean_ess", "status")


def _per_step(value: float, data: np.ndarray) -> float:
    return value / data.shape[1]


def train(model: SsmModel, data: Dataset, cfg: TrainConfig,
          log: Callable[[EpochRecord], None] | None = None) -> tuple[SsmModel, list[EpochRecord]]:
    """Maximise the objective with Adam; return the best-validation model.

    Objective values in the history are per time step.  An epoch that hits a
    non-finite objective or gradient is abandoned, its parameters rolled back
    to the start of that epoch, and recorded with status ``nan``; a singular
    filter covariance does the same with status ``degenerate``.
    """
    train_x = data.split("train")
    if len(train_x) == 0:
        raise ValueError("dataset has no training sequences")
    valid_x = data.split("valid") if len(data.splits.get("valid", ())) else None
    root = Rng(cfg.seed)
    params = model.params.copy()
    state = AdamState.zeros_like(params)
    best_params, best_score = params.copy(), -math.inf
    history: list[EpochRecord] = []
    eval_kind = cfg.objective if cfg.objective.kind != "fivor" else replace(cfg.objective, kind="fivo")

    def score(p_vec, x, rng):
        try:
            res = evaluate(model.with_params(p_vec), x, eval_kind, rng, diagnostics=False)
        except DegenerateCovarianceError:
            return math.nan
        return _per_step(float(res.value.value), x)

    if valid_x is not None:
        best_score = score(params, valid_x, root.child("valid"))
    for epoch in range(1, cfg.epochs + 1):
        start_params, start_state = params.copy(), state
        order = root.child("shuffle", epoch).generator.permutation(len(train_x))
        vals, norms, esses, status = [], [], [], "ok"
        for b, lo in enumerate(range(0, len(order), cfg.batch_size)):
            xb = train_x[order[lo:lo + cfg.batch_size]]
            try:
                res, grad = value_and_grad(model, xb, cfg.objective, root.child("train", epoch, b), params,
                                           diagnostics=False)
            except DegenerateCovarianceError:
                status = "degenerate"
                break
            val = float(res.value.value)
            if not (math.isfinite(val) and np.all(np.isfinite(grad))):
                status = "nan"
                break
            norm = float(np.linalg.norm(grad))
            if cfg.grad_clip_norm is not None and norm > cfg.grad_clip_norm:
                grad = grad * (cfg.grad_clip_norm / norm)
            params, state = adam_step(params, -grad, state, cfg.learning_rate)
            vals.append(_per_step(val, xb))
            norms.append(norm)
            esses.append(float(np.mean(res.per_step_ess)))
        if status != "ok":
            params, state = start_params, start_state
        train_obj = float(np.mean(vals)) if vals else math.nan
        if valid_x is not None:
            valid_obj = score(params, valid_x, root.child("valid"))
        else:
            valid_obj = train_obj
        rec = EpochRecord(epoch, train_obj, valid_obj,
                          float(np.mean(norms)) if norms else math.nan,
                          float(np.mean(esses)) if esses else math.nan, status)
        history.append(rec)
        if log is not None:
            log(rec)
        if math.isfinite(valid_obj) and valid_obj > best_score:
            best_score, best_params = valid_obj, params.copy()
    if valid_x is None and cfg.epochs > 0:
        best_params = params
    return model.with_params(best_params), history


# ------------------------------------------------------------ prediction

@dataclass
class MseResult:
    horizons: list[int]
    mse: np.ndarray
    stderr: np.ndarray
    per_sequence: np.ndarray   # (n_sequences, n_horizons)


def posterior_particles(model: SsmModel, x: np.ndarray, kind: ObjectiveKind, rng: Rng) -> np.ndarray:
    """Unweighted particles approximating ``p(z_c | x_{1:c})`` for each sequence.

    EnKO returns its filtered ensemble, FIVO its resampled particles, and IWAE
    resamples its final draws by the accumulated importance weights.
    """
    ev_kind = replace(kind, kind="fivo") if kind.kind == "fivor" else kind
    res = evaluate(model, x, ev_kind, rng.child("filter"), diagnostics=False)
    z = res.particles
    if ev_kind.kind == "iwae":
        idx = multinomial_resample(res.log_weights, rng.child("resample"))
        z = np.take_along_axis(z, idx[..., None], axis=-2)
    return z


def predict_mse(model: SsmModel, x: np.ndarray, kind: ObjectiveKind, context_len: int,
                horizons, rng: Rng) -> MseResult:
    """k-step predictive MSE after filtering on the first ``context_len`` steps.

    From the filtered particles the generative transition is rolled forward
    without observations; the prediction at each horizon is the particle
    average of the emission mean.  Errors are averaged over sequences and
    observation dimensions.
    """
    x = np.asarray(x, dtype=np.float64)
    horizons = sorted({int(h) for h in horizons})
    if not horizons or horizons[0] < 1:
        raise ValueError("horizons must be positive integers")
    if context_len < 1 or context_len + horizons[-1] > x.shape[1]:
        raise ValueError(f"context_len {context_len} + horizon {horizons[-1]} exceeds T={x.shape[1]}")
    p = model.unpack()
    z = Node(posterior_particles(model, x[:, :context_len], kind, rng))
    roll = rng.child("rollout")
    per_seq = np.empty((x.shape[0], len(horizons)))
    col = {h: j for j, h in enumerate(horizons)}
    history = [z]
    for h in range(1, horizons[-1] + 1):
        dist = model.transition_dist(p, history)
        z = dist.transform(dist.noise(roll, z.shape))
        history = history + [z]
        if h in col:
            pred = model.emission_dist(p, z).mean.value.mean(axis=-2)
            err = (pred - x[:, context_len + h - 1]) ** 2
            per_seq[:, col[h]] = err.mean(axis=-1)
    n = per_seq.shape[0]
    mse = per_seq.mean(axis=0)
    se = per_seq.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros(len(horizons))
    return MseResult(horizons, mse, se, per_seq)


# ----------------------------------------------------------------- sweep

SWEEP_AXES = ("n_particles", "inflation_factor")


@dataclass
class SweepRow:
    value: float
    mse: np.ndarray
    valid_objective: float
    status: str = "ok"


def apply_axis(cfg: TrainConfig, axis: str, value) -> TrainConfig:
    obj = cfg.objective
    if axis == "n_particles":
        obj = replace(obj, n_particles=int(value))
    elif axis == "inflation_factor":
        obj = replace(obj, inflation=replace(obj.inflation, alpha=float(value)))
    else:
        raise ValueError(f"unknown sweep axis {axis!r}")
    return replace(cfg, objective=obj)


def sweep(axis: str, values, base: TrainConfig, data: Dataset,
          model_factory: Callable[[int], SsmModel], context_len: int, horizons,
          eval_particles: int | None = None) -> list[SweepRow]:
    """Train and evaluate one cell per value with the same seed.

    A failing cell is recorded with status ``error: ...`` and the sweep moves on.
    """
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    rows = []
    valid = data.split("valid")
    for value in values:
        try:
            cfg = apply_axis(base, axis, value)
            model, hist = train(model_factory(cfg.seed), data, cfg)
            kind = cfg.objective if eval_particles is None else replace(cfg.objective,
                                                                        n_particles=eval_particles)
            res = predict_mse(model, valid, kind, context_len, horizons, Rng(cfg.seed).child("eval"))
            best = max((r.valid_objective for r in hist), default=math.nan)
            rows.append(SweepRow(float(value), res.mse, best))
        except (ValueError, ArithmeticError, np.linalg.LinAlgError) as err:
            rows.append(SweepRow(float(value), np.full(len(list(horizons)), math.nan), math.nan,
                                 f"error: {err}"))
    return rows


def select_best(rows: list[SweepRow]) -> SweepRow:
    """Row with the smallest mean validation MSE over horizons (ties: first)."""
    ok = [r for r in rows if r.status == "ok" and np.all(np.isfinite(r.mse))]
    if not ok:
        raise ValueError("no successful sweep cell to select from")
    return min(ok, key=lambda r: float(np.mean(r.mse)))
