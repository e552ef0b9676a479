"""Ensemble objectives: EnKO, IWAE, FIVO and the FIVOr gradient surrogate.

All objectives work on a batch ``x`` of shape ``(B, T, d_x)`` with particles
``(B, N, d_z)`` and return the batch mean of the per-sequence bound.

Random draws happen in a fixed order so that a given seed pins every noise
variate.  At each step ``t``:

1. proposal noise ``(B, N, d_z)``;
2. EnKO only: emission noise ``(B, N, d_x)`` for the filter;
3. FIVO/FIVOr only, when the trigger fires: resampling uniforms.

Noise shapes never depend on parameter values, so re-seeding gives common
random numbers across parameter points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape
from .distributions import Rng
from .filters import (EnsembleState, FilterConfig, InflationConfig, enkf_update, ess,
                      mean_pairwise_distance, resample)
from .models import SsmModel

OBJECTIVE_KINDS = ("enko", "fivo", "fivor", "iwae")


@dataclass(frozen=True)
class ObjectiveKind:
    kind: str = "enko"
    n_particles: int = 16
    filter_cfg: FilterConfig = field(default_factory=FilterConfig)
    inflation: InflationConfig = field(default_factory=InflationConfig)

    def __post_init__(self):
        if self.kind not in OBJECTIVE_KINDS:
            raise ValueError(f"unknown objective {self.kind!r}")
        min_n = 1 if self.kind == "iwae" else 2
        if self.n_particles < min_n:
            raise ValueError(f"{self.kind} needs at least {min_n} particles")


@dataclass
class ObjectiveResult:
    value: Node
    log_p_hat: np.ndarray
    per_step_ess: np.ndarray
    diversity: np.ndarray
    particles: np.ndarray
    log_weights: np.ndarray
    ancestors: list = field(default_factory=list)
    surrogate: Node | None = None


def _batch(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise ValueError(f"observations must be (B, T, d_x), got shape {x.shape}")
    return x


def weight_step(model: SsmModel, p, z_t: Node, history: list, x_t, proposal) -> Node:
    """``log g(x_t|z_t) + log f(z_t|history) - log q(z_t)``, shape ``(B, N)``.

    An empty ``history`` means the first step, scored under the initial prior.
    ``proposal`` is the distribution ``z_t`` was drawn from.
    """
    prior = model.initial_dist(p) if not history else model.transition_dist(p, history)
    x_t = np.asarray(x_t, dtype=np.float64)
    x_b = x_t[..., None, :] if x_t.ndim == z_t.ndim - 1 else x_t
    log_g = model.emission_dist(p, z_t).logpdf(x_b)
    return log_g + prior.logpdf(z_t) - proposal.logpdf(z_t)


def _propose(model, p, x, t, cond_history, rng, shape):
    dist = model.proposal_initial(p, x) if t == 0 else model.proposal_dist(p, cond_history, x, t)
    return dist, dist.transform(dist.noise(rng, shape))


def _log_mean_exp(lw: Node) -> Node:
    return ad.logsumexp(lw, axis=-1) - math.log(lw.shape[-1])


def _finish(value_per_seq: Node, ess_hist, div_hist, particles, log_weights,
            ancestors=None, surrogate=None):
    return ObjectiveResult(
        value=ad.mean(value_per_seq),
        log_p_hat=value_per_seq.value.copy(),
        per_step_ess=np.array(ess_hist),
        diversity=np.array(div_hist),
        particles=particles.value.copy(),
        log_weights=log_weights.value.copy(),
        ancestors=ancestors or [],
        surrogate=surrogate)


def iwae_objective(model: SsmModel, x, cfg: ObjectiveKind, rng: Rng, p=None,
                   diagnostics: bool = True) -> ObjectiveResult:
    """Independent trajectories; each proposal conditions on its own past."""
    x = _batch(x)
    p = p if p is not None else model.unpack()
    B, T, _ = x.shape
    shape = (B, cfg.n_particles, model.d_z)
    history: list[Node] = []
    cum = None
    ess_hist, div_hist = [], []
    for t in range(T):
        q, z = _propose(model, p, x, t, history, rng, shape)
        lw = weight_step(model, p, z, history, x[:, t], q)
        cum = lw if cum is None else cum + lw
        history.append(z)
        ess_hist.append(float(ess(cum).mean()))
        if diagnostics:
            div_hist.append(float(mean_pairwise_distance(z).mean()) if cfg.n_particles > 1 else 0.0)
    return _finish(_log_mean_exp(cum), ess_hist, div_hist, history[-1], cum)


def enko_objective(model: SsmModel, x, cfg: ObjectiveKind, rng: Rng, p=None,
                   diagnostics: bool = True) -> ObjectiveResult:
    """Ensemble Kalman variational objective.

    The proposal conditions on the filtered (and inflated) history, while the
    weight numerator scores each particle under the transition given its own
    unfiltered draws.  That pairing is what makes ``exp(value)`` unbiased for
    the marginal likelihood.
    """
    x = _batch(x)
    p = p if p is not None else model.unpack()
    B, T, _ = x.shape
    shape = (B, cfg.n_particles, model.d_z)
    raw: list[Node] = []
    state = None
    cum = None
    ess_hist, div_hist = [], []
    for t in range(T):
        cond = state.trajectories if state is not None else []
        q, z = _propose(model, p, x, t, cond, rng, shape)
        lw = weight_step(model, p, z, raw, x[:, t], q)
        cum = lw if cum is None else cum + lw
        raw.append(z)
        prev = state.trajectories if state is not None else []
        state = enkf_update(EnsembleState(z, cum, prev), x[:, t], model.emission_dist(p, z),
                            cfg.filter_cfg, cfg.inflation, rng)
        ess_hist.append(float(ess(cum).mean()))
        if diagnostics:
            div_hist.append(float(mean_pairwise_distance(state.particles).mean()))
    return _finish(_log_mean_exp(cum), ess_hist, div_hist, state.particles, cum)


def _should_resample(lw: Node, trigger: str) -> np.ndarray:
    """Boolean mask over the batch."""
    if trigger == "every_step":
        return np.ones(lw.shape[:-1], dtype=bool)
    return ess(lw) < 0.5 * lw.shape[-1]


def fivo_objective(model: SsmModel, x, cfg: ObjectiveKind, rng: Rng, p=None,
                   ancestors: list | None = None, score_terms: bool = False,
                   diagnostics: bool = True) -> ObjectiveResult:
    """SMC log-marginal estimate with resampling gradients blocked.

    ``ancestors`` replays a recorded ``result.ancestors`` list (per step either
    ``None`` or ``(indices, resampled_mask)``), which makes the estimator a smooth function
    of the parameters for finite-difference checks.  With ``score_terms`` the
    result also carries the FIVOr surrogate.
    """
    x = _batch(x)
    p = p if p is not None else model.unpack()
    B, T, _ = x.shape
    N = cfg.n_particles
    shape = (B, N, model.d_z)
    fc = cfg.filter_cfg
    if score_terms and fc.resampling_scheme != "multinomial":
        raise ValueError("the resampling score term needs multinomial resampling")
    history: list[Node] = []
    lw = Node(np.full((B, N), -math.log(N)))
    increments: list[Node] = []   # per-sequence log-normaliser contributions
    log_probs: list[tuple[int, Node]] = []   # (index into increments, log P(ancestors))
    used: list = []
    ess_hist, div_hist = [], []
    z = None
    for t in range(T):
        q, z = _propose(model, p, x, t, history, rng, shape)
        lw = lw + weight_step(model, p, z, history, x[:, t], q)
        history = history + [z]
        ess_hist.append(float(ess(lw).mean()))
        idx = mask = None
        if ancestors is not None:
            if ancestors[t] is not None:
                idx, mask = ancestors[t]
        else:
            fire = _should_resample(lw, fc.resample_trigger)
            if fire.any():
                mask = fire
                idx = np.where(mask[:, None], resample(lw, rng, fc.resampling_scheme), np.arange(N))
        used.append(None if idx is None else (idx.copy(), mask.copy()))
        if idx is not None:
            lse = ad.logsumexp(lw, axis=-1)
            increments.append(ad.where(mask, lse, 0.0))
            if score_terms:
                logw_norm = lw - ad.reshape(lse, (B, 1))
                picked = ad.sum(ad.take(logw_norm, (np.arange(B)[:, None], idx)), axis=-1)
                log_probs.append((len(increments), ad.where(mask, picked, 0.0)))
            history = [ad.gather_rows(h, idx) for h in history]
            lw = ad.where(mask[:, None], -math.log(N), lw)
        z = history[-1]
        if diagnostics:
            div_hist.append(float(mean_pairwise_distance(z).mean()))
    increments.append(ad.logsumexp(lw, axis=-1))
    total = increments[0]
    for inc in increments[1:]:
        total = total + inc
    surrogate = None
    if score_terms:
        surrogate = total
        for k, logp in log_probs:
            downstream = np.zeros(B)
            for inc in increments[k:]:
                downstream = downstream + inc.value
            surrogate = surrogate + logp * downstream
        surrogate = ad.mean(surrogate)
    return _finish(total, ess_hist, div_hist, z, lw, used, surrogate)


def evaluate(model: SsmModel, x, cfg: ObjectiveKind, rng: Rng, p=None,
             diagnostics: bool = True) -> ObjectiveResult:
    """Dispatch on ``cfg.kind``; ``fivor`` evaluates like FIVO.

    With ``diagnostics=False`` the per-step diversity trace is skipped.
    """
    if cfg.kind == "enko":
        return enko_objective(model, x, cfg, rng, p, diagnostics)
    if cfg.kind == "iwae":
        return iwae_objective(model, x, cfg, rng, p, diagnostics)
    return fivo_objective(model, x, cfg, rng, p, score_terms=cfg.kind == "fivor",
                          diagnostics=diagnostics)


def value_and_grad(model: SsmModel, x, cfg: ObjectiveKind, rng: Rng,
                   params: np.ndarray | None = None,
                   diagnostics: bool = True) -> tuple[ObjectiveResult, np.ndarray]:
    """Objective and its gradient with respect to the flat parameter vector.

    For ``fivor`` the gradient is that of the score-function surrogate, whose
    expectation is the gradient of the FIVO objective.
    """
    theta = Node(model.params if params is None else params, requires_grad=True)
    with Tape() as tape:
        res = evaluate(model, x, cfg, rng, model.layout.unpack(theta), diagnostics)
        root = res.surrogate if cfg.kind == "fivor" else res.value
        tape.backward(root)
    grad = theta.grad if theta.grad is not None else np.zeros_like(theta.value)
    return res, grad.copy()


def fivor_grad(model: SsmModel, x, cfg: ObjectiveKind, rng: Rng) -> np.ndarray:
    """FIVO gradient plus the resampling score-function term."""
    if cfg.filter_cfg.resampling_scheme != "multinomial":
        raise ValueError("FIVOr is defined for multinomial resampling only")
    cfg = ObjectiveKind("fivor", cfg.n_particles, cfg.filter_cfg, cfg.inflation)
    return value_and_grad(model, x, cfg, rng)[1]
