"""Per-step particle transformations: EnKF analysis, inflation, resampling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node, NotPositiveDefiniteError, ShapeError
from .distributions import Rng

INFLATION_METHODS = ("none", "rtpp", "rtps", "rtps_anomaly")
RESAMPLING_SCHEMES = ("multinomial", "systematic")
RESAMPLE_TRIGGERS = ("every_step", "ess_below_half")


class DegenerateCovarianceError(np.linalg.LinAlgError):
    """Observation-sample covariance stayed singular after adding jitter."""


@dataclass(frozen=True)
class InflationConfig:
    method: str = "none"
    alpha: float = 0.0

    def __post_init__(self):
        if self.method not in INFLATION_METHODS:
            raise ValueError(f"unknown inflation method {self.method!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"inflation alpha must lie in [0, 1], got {self.alpha}")


@dataclass(frozen=True)
class FilterConfig:
    jitter: float = 1e-6
    resampling_scheme: str = "multinomial"
    resample_trigger: str = "every_step"

    def __post_init__(self):
        if not self.jitter > 0:
            raise ValueError("jitter must be positive")
        if self.resampling_scheme not in RESAMPLING_SCHEMES:
            raise ValueError(f"unknown resampling scheme {self.resampling_scheme!r}")
        if self.resample_trigger not in RESAMPLE_TRIGGERS:
            raise ValueError(f"unknown resample trigger {self.resample_trigger!r}")


@dataclass
class EnsembleState:
    """Particles ``(..., N, d_z)`` at one step with running log-weights ``(..., N)``."""

    particles: Node
    cum_log_weight: Node
    trajectories: list = field(default_factory=list)

    def __post_init__(self):
        if self.particles.shape[-2] < 2:
            raise ValueError("an ensemble needs at least two particles")

    @property
    def n_particles(self) -> int:
        return self.particles.shape[-2]


# ----------------------------------------------------------------- EnKF

def _centered(a: Node) -> Node:
    return a - ad.mean(a, axis=-2, keepdims=True)


def _cholesky_with_jitter(S: Node, jitter: float) -> Node:
    try:
        return ad.cholesky(S)
    except NotPositiveDefiniteError:
        pass
    d = S.shape[-1]
    level = jitter * np.mean(np.abs(np.diagonal(S.value, axis1=-2, axis2=-1)), axis=-1)
    level = np.maximum(level, jitter)[..., None, None]
    try:
        return ad.cholesky(S + level * np.eye(d))
    except NotPositiveDefiniteError as err:
        raise DegenerateCovarianceError("degenerate observation covariance") from err


def kalman_gain_update(z: Node, x_samples: Node, x_means: Node, x_obs,
                       jitter: float = 1e-6) -> Node:
    """Perturbed-observation EnKF correction of particles ``z``.

    The observation covariance is the sample covariance of the emission
    *samples*; the cross covariance pairs the particles with the emission
    *means*.  Both use the ``1/(N-1)`` convention.  Shapes: ``z`` is
    ``(..., N, d_z)``, emissions ``(..., N, d_x)``, ``x_obs`` ``(..., d_x)``
    or per particle ``(..., N, d_x)``.
    """
    z, x_samples, x_means = ad.as_node(z), ad.as_node(x_samples), ad.as_node(x_means)
    n = z.shape[-2]
    if n < 2:
        raise ValueError("the EnKF needs at least two particles")
    if x_samples.shape != x_means.shape or x_samples.shape[-2] != n:
        raise ShapeError(f"emission shapes {x_samples.shape}/{x_means.shape} vs particles {z.shape}")
    x_obs = ad.as_node(x_obs)
    zc = _centered(z)
    xc = _centered(x_samples)
    mc = _centered(x_means)
    cov_x = (xc.mT @ xc) / (n - 1.0)
    cov_zm = (zc.mT @ mc) / (n - 1.0)
    L = _cholesky_with_jitter(cov_x, jitter)
    # gain^T = cov_x^{-1} cov_zm^T, via two triangular solves
    half = ad.triangular_solve(L, cov_zm.mT, lower=True)
    gain_t = ad.triangular_solve(L.mT, half, lower=False)
    if x_obs.ndim < x_samples.ndim:
        x_obs = ad.reshape(x_obs, x_obs.shape[:-1] + (1, x_obs.shape[-1]))
    innovation = x_obs - x_samples
    return z + innovation @ gain_t


def rtpp_inflate(prior, filtered, alpha: float) -> Node:
    """Relaxation to prior perturbation: a convex blend of the two ensembles."""
    prior, filtered = ad.as_node(prior), ad.as_node(filtered)
    if prior.shape != filtered.shape:
        raise ShapeError(f"rtpp: shapes {prior.shape} and {filtered.shape} differ")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if alpha == 0.0:
        return filtered
    if alpha == 1.0:
        return prior
    return prior * alpha + filtered * (1.0 - alpha)


def _sample_std(a: Node) -> tuple[Node, np.ndarray]:
    n = a.shape[-2]
    var = ad.sum(ad.square(_centered(a)), axis=-2, keepdims=True) / (n - 1.0)
    tiny = var.value < 1e-24
    return ad.sqrt(ad.where(tiny, 1.0, var)), tiny


def rtps_scale(prior, filtered, alpha: float) -> Node:
    """Per-dimension factor ``(alpha*s + (1-alpha)*s_f) / s_f``, shape ``(..., 1, d)``.

    Where the filtered spread vanishes (``s_f < 1e-12``) the factor is 1.
    """
    s_prior, _ = _sample_std(ad.as_node(prior))
    s_filt, tiny = _sample_std(ad.as_node(filtered))
    scale = (s_prior * alpha + s_filt * (1.0 - alpha)) / s_filt
    return ad.where(tiny, 1.0, scale)


def rtps_inflate(prior, filtered, alpha: float, anomaly: bool = False) -> Node:
    """Relaxation to prior spread.

    By default the filtered particles themselves are rescaled.  With
    ``anomaly=True`` only deviations from the filtered ensemble mean are
    rescaled, which preserves the mean.
    """
    prior, filtered = ad.as_node(prior), ad.as_node(filtered)
    if prior.shape != filtered.shape:
        raise ShapeError(f"rtps: shapes {prior.shape} and {filtered.shape} differ")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if filtered.shape[-2] < 2:
        raise ValueError("rtps needs at least two particles")
    if alpha == 0.0:
        return filtered
    scale = rtps_scale(prior, filtered, alpha)
    if not anomaly:
        return filtered * scale
    mu = ad.mean(filtered, axis=-2, keepdims=True)
    return mu + (filtered - mu) * scale


def inflate(prior, filtered, infl: InflationConfig) -> Node:
    if infl.method == "rtpp":
        return rtpp_inflate(prior, filtered, infl.alpha)
    if infl.method == "rtps":
        return rtps_inflate(prior, filtered, infl.alpha)
    if infl.method == "rtps_anomaly":
        return rtps_inflate(prior, filtered, infl.alpha, anomaly=True)
    return ad.as_node(filtered)


def enkf_update(state: EnsembleState, x_t, emission, cfg: FilterConfig,
                infl: InflationConfig, rng: Rng) -> EnsembleState:
    """One EnKF analysis step followed by covariance inflation.

    ``emission`` is the emission distribution evaluated at the particles; a
    fresh pathwise sample is drawn from it here.  Log-weights pass through.
    """
    z = state.particles
    x_samples = emission.rsample(rng)
    zf = kalman_gain_update(z, x_samples, emission.mean, x_t, cfg.jitter)
    zc = inflate(z, zf, infl)
    return EnsembleState(zc, state.cum_log_weight, state.trajectories + [zc])


# ----------------------------------------------------------- resampling

def normalized_weights(log_weights) -> np.ndarray:
    lw = np.asarray(getattr(log_weights, "value", log_weights), dtype=np.float64)
    m = np.max(lw, axis=-1, keepdims=True)
    w = np.exp(lw - m)
    return w / w.sum(axis=-1, keepdims=True)


def _invert_cdf(w: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(w, axis=-1)
    cdf[..., -1] = 1.0
    idx = (u[..., :, None] >= cdf[..., None, :]).sum(axis=-1)
    # u can round onto the last cdf entry
    return np.minimum(idx, w.shape[-1] - 1)


def multinomial_resample(log_weights, rng: Rng, n: int | None = None) -> np.ndarray:
    """``n`` (default: as many as weights) ancestors drawn i.i.d. from the weights."""
    w = normalized_weights(log_weights)
    u = rng.uniform(w.shape[:-1] + (n or w.shape[-1],))
    return _invert_cdf(w, u)


def systematic_resample(log_weights, rng: Rng, n: int | None = None) -> np.ndarray:
    """Single-offset stratified inversion; counts differ from ``n w_i`` by < 1."""
    w = normalized_weights(log_weights)
    n = n or w.shape[-1]
    u0 = rng.uniform(w.shape[:-1] + (1,))
    u = (u0 + np.arange(n)) / n
    return _invert_cdf(w, u)


def resample(log_weights, rng: Rng, scheme: str = "multinomial", n: int | None = None) -> np.ndarray:
    if scheme == "systematic":
        return systematic_resample(log_weights, rng, n)
    if scheme == "multinomial":
        return multinomial_resample(log_weights, rng, n)
    raise ValueError(f"unknown resampling scheme {scheme!r}")


def ess(log_weights) -> np.ndarray:
    """Effective sample size ``1 / sum(w_i^2)`` of the normalised weights."""
    w = normalized_weights(log_weights)
    return 1.0 / np.sum(w * w, axis=-1)


def mean_pairwise_distance(particles) -> np.ndarray:
    """Mean Euclidean distance over distinct particle pairs, per batch element."""
    z = np.asarray(getattr(particles, "value", particles))
    n = z.shape[-2]
    diff = z[..., :, None, :] - z[..., None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    return dist.sum(axis=(-1, -2)) / (n * (n - 1))
