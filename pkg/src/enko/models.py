"""State-space models with learnable proposals, plus the exact Kalman oracle.

Every model keeps its learnable parameters in one flat float64 vector.
Distribution constructors take ``p``, the dict of named parameter nodes
returned by :meth:`SsmModel.unpack`, so they stay pure functions of
``(params, inputs)`` and are differentiable whenever ``p`` is.

Particle arrays have shape ``(B, N, d)``; observations ``(B, T, d_x)``.
"""

from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .distributions import GaussianDiag, Rng, StudentT


class ParamLayout:
    """Named slices of a flat parameter vector."""

    def __init__(self, entries):
        self.shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict(
            (name, tuple(shape)) for name, shape in entries)
        self.slices: dict[str, slice] = {}
        start = 0
        for name, shape in self.shapes.items():
            n = int(np.prod(shape, dtype=int))
            self.slices[name] = slice(start, start + n)
            start += n
        self.size = start

    def __contains__(self, name) -> bool:
        return name in self.shapes

    def names(self) -> list[str]:
        return list(self.shapes)

    def unpack(self, flat: Node) -> dict[str, Node]:
        return {name: ad.reshape(ad.take(flat, self.slices[name]), shape)
                for name, shape in self.shapes.items()}

    def unflatten(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        flat = np.asarray(flat)
        return {name: flat[self.slices[name]].reshape(shape)
                for name, shape in self.shapes.items()}

    def flatten(self, values: dict) -> np.ndarray:
        out = np.zeros(self.size)
        for name, shape in self.shapes.items():
            out[self.slices[name]] = np.broadcast_to(np.asarray(values[name], dtype=np.float64),
                                                     shape).reshape(-1)
        return out


def _rowmul(z: Node, A: Node) -> Node:
    """Apply matrix ``A`` to each row vector of ``z``: ``z @ A.T``."""
    return z @ A.mT


def _quad_features(z: Node) -> Node:
    """flatten(z z^T) per row: ``(..., d) -> (..., d*d)``."""
    d = z.shape[-1]
    return ad.reshape(ad.outer(z, z), z.shape[:-1] + (d * d,))


class SsmModel:
    """Generative model ``(f, g)`` plus variational proposal ``q``.

    Subclasses define :attr:`layout` and the five distribution constructors.
    """

    kind = "base"
    markov = True

    def __init__(self, d_z: int, d_x: int, layout: ParamLayout, params=None):
        self.d_z = int(d_z)
        self.d_x = int(d_x)
        self.layout = layout
        if params is None:
            params = np.zeros(layout.size)
        params = np.array(params, dtype=np.float64, copy=True)
        if params.shape != (layout.size,):
            raise ValueError(f"expected {layout.size} parameters, got shape {params.shape}")
        self.params = params

    # -- parameter plumbing
    def config(self) -> dict:
        return {"kind": self.kind, "d_z": self.d_z, "d_x": self.d_x}

    def with_params(self, params) -> "SsmModel":
        new = object.__new__(type(self))
        new.__dict__.update(self.__dict__)
        new.params = np.array(params, dtype=np.float64, copy=True)
        if new.params.shape != (self.layout.size,):
            raise ValueError("parameter vector has the wrong size")
        return new

    def named(self) -> dict[str, np.ndarray]:
        return self.layout.unflatten(self.params)

    def unpack(self, theta: Node | None = None) -> dict[str, Node]:
        return self.layout.unpack(theta if theta is not None else Node(self.params))

    # -- distribution constructors
    def initial_dist(self, p):
        raise NotImplementedError

    def transition_dist(self, p, history: list):
        raise NotImplementedError

    def emission_dist(self, p, z):
        raise NotImplementedError

    def proposal_initial(self, p, x: np.ndarray):
        raise NotImplementedError

    def proposal_dist(self, p, history: list, x: np.ndarray, t: int):
        raise NotImplementedError


# --------------------------------------------------------------- linear

class LinearGaussianSSM(SsmModel):
    """Linear-Gaussian SSM with a linear-Gaussian proposal.

    ``q(z_1) = N(mu_q1, s_q1^2)``, ``q(z_t|z_{t-1}) = N(A_q z_{t-1}, s_q^2)``,
    ``f(z_1) = N(mu_f1, s_f1^2)``, ``f(z_t|z_{t-1}) = N(A_f z_{t-1}, s_f^2)``,
    ``g(x_t|z_t) = N(A_g z_t, s_g^2)``.  Scales are stored as logs.
    """

    kind = "lgssm"

    def __init__(self, d_z: int, d_x: int, params=None):
        layout = ParamLayout([
            ("mu_q1", (d_z,)), ("log_sigma_q1", (d_z,)), ("A_q", (d_z, d_z)), ("log_sigma_q", (d_z,)),
            ("mu_f1", (d_z,)), ("log_sigma_f1", (d_z,)), ("A_f", (d_z, d_z)), ("log_sigma_f", (d_z,)),
            ("A_g", (d_x, d_z)), ("log_sigma_g", (d_x,)),
        ])
        super().__init__(d_z, d_x, layout, params)

    @classmethod
    def from_values(cls, d_z, d_x, **values) -> "LinearGaussianSSM":
        """Build from natural parameters; ``sigma_*`` entries are converted to logs."""
        model = cls(d_z, d_x)
        named = {k: np.zeros(s) for k, s in model.layout.shapes.items()}
        for key, val in values.items():
            if key.startswith("sigma_"):
                with np.errstate(divide="ignore"):  # sigma = 0 gives a noiseless model
                    named["log_" + key] = np.log(np.broadcast_to(np.asarray(val, float),
                                                                 model.layout.shapes["log_" + key]))
            elif key in named:
                named[key] = val
            else:
                raise KeyError(f"unknown parameter {key!r}")
        model.params = model.layout.flatten(named)
        return model

    @classmethod
    def default_init(cls, d_z: int, d_x: int, rng: Rng, sigma1: float = 0.1,
                   sigma: float = 0.01) -> "LinearGaussianSSM":
        """Gradient-study parameter point: identity-plus-noise dynamics, small scales."""
        g = rng.generator
        A_q = np.eye(d_z) + g.uniform(-0.05, 0.05, (d_z, d_z))
        A_f = np.eye(d_z) + g.uniform(-0.05, 0.05, (d_z, d_z))
        A_g = g.uniform(-0.5, 0.5, (d_x, d_z))
        return cls.from_values(
            d_z, d_x, mu_q1=np.zeros(d_z), sigma_q1=sigma1, A_q=A_q, sigma_q=sigma,
            mu_f1=np.zeros(d_z), sigma_f1=sigma1, A_f=A_f, sigma_f=sigma,
            A_g=A_g, sigma_g=sigma)

    def bootstrap(self) -> "LinearGaussianSSM":
        """Same generative model with the proposal set equal to the prior dynamics."""
        n = self.named()
        n["mu_q1"], n["log_sigma_q1"] = n["mu_f1"], n["log_sigma_f1"]
        n["A_q"], n["log_sigma_q"] = n["A_f"], n["log_sigma_f"]
        return self.with_params(self.layout.flatten(n))

    def initial_dist(self, p):
        return GaussianDiag(p["mu_f1"], ad.exp(p["log_sigma_f1"]))

    def transition_dist(self, p, history):
        return GaussianDiag(_rowmul(history[-1], p["A_f"]), ad.exp(p["log_sigma_f"]))

    def emission_dist(self, p, z):
        return GaussianDiag(_rowmul(z, p["A_g"]), ad.exp(p["log_sigma_g"]))

    def proposal_initial(self, p, x):
        return GaussianDiag(p["mu_q1"], ad.exp(p["log_sigma_q1"]))

    def proposal_dist(self, p, history, x, t):
        return GaussianDiag(_rowmul(history[-1], p["A_q"]), ad.exp(p["log_sigma_q"]))


# ------------------------------------------------------------ nonlinear

class NonlinearStudentSSM(SsmModel):
    """Quadratic-tanh dynamics with Student-t transition and emission noise.

    Means are ``tanh(C flatten(z z^T) + A z + b)``; the proposal is Gaussian
    with the same mean family, the transition and emission are Student-t with
    ``df`` degrees of freedom and independent coordinates.
    """

    kind = "nonlinear_student"

    def __init__(self, d_z: int, d_x: int, params=None, df: float = 5.0):
        self.df = float(df)
        dq = d_z * d_z
        layout = ParamLayout([
            ("mu_q1", (d_z,)), ("log_sigma_q1", (d_z,)),
            ("C_q", (d_z, dq)), ("A_q", (d_z, d_z)), ("b_q", (d_z,)), ("log_sigma_q", (d_z,)),
            ("mu_f1", (d_z,)), ("log_sigma_f1", (d_z,)),
            ("C_f", (d_z, dq)), ("A_f", (d_z, d_z)), ("b_f", (d_z,)), ("log_sigma_f", (d_z,)),
            ("C_g", (d_x, dq)), ("A_g", (d_x, d_z)), ("b_g", (d_x,)), ("log_sigma_g", (d_x,)),
        ])
        super().__init__(d_z, d_x, layout, params)

    def config(self) -> dict:
        return {**super().config(), "df": self.df}

    @classmethod
    def default_init(cls, d_z: int, d_x: int, rng: Rng, sigma1: float = 0.1,
                   sigma: float = 0.01, df: float = 5.0) -> "NonlinearStudentSSM":
        g = rng.generator
        model = cls(d_z, d_x, df=df)
        dq = d_z * d_z
        named = {
            "mu_q1": np.zeros(d_z), "log_sigma_q1": np.full(d_z, math.log(sigma1)),
            "C_q": g.uniform(-0.05, 0.05, (d_z, dq)),
            "A_q": np.eye(d_z) + g.uniform(-0.05, 0.05, (d_z, d_z)),
            "b_q": np.zeros(d_z), "log_sigma_q": np.full(d_z, math.log(sigma)),
            "mu_f1": np.zeros(d_z), "log_sigma_f1": np.full(d_z, math.log(sigma1)),
            "C_f": g.uniform(-0.05, 0.05, (d_z, dq)),
            "A_f": np.eye(d_z) + g.uniform(-0.05, 0.05, (d_z, d_z)),
            "b_f": np.zeros(d_z), "log_sigma_f": np.full(d_z, math.log(sigma)),
            "C_g": g.uniform(-0.05, 0.05, (d_x, dq)),
            "A_g": g.uniform(-0.5, 0.5, (d_x, d_z)),
            "b_g": np.zeros(d_x), "log_sigma_g": np.full(d_x, math.log(sigma)),
        }
        model.params = model.layout.flatten(named)
        return model

    def _mean(self, p, z, tag):
        return ad.tanh(_rowmul(_quad_features(z), p["C_" + tag])
                       + _rowmul(z, p["A_" + tag]) + p["b_" + tag])

    def initial_dist(self, p):
        return GaussianDiag(p["mu_f1"], ad.exp(p["log_sigma_f1"]))

    def transition_dist(self, p, history):
        return StudentT(self.df, self._mean(p, history[-1], "f"), ad.exp(p["log_sigma_f"]))

    def emission_dist(self, p, z):
        return StudentT(self.df, self._mean(p, z, "g"), ad.exp(p["log_sigma_g"]))

    def proposal_initial(self, p, x):
        return GaussianDiag(p["mu_q1"], ad.exp(p["log_sigma_q1"]))

    def proposal_dist(self, p, history, x, t):
        return GaussianDiag(self._mean(p, history[-1], "q"), ad.exp(p["log_sigma_q"]))


# --------------------------------------------------------------- neural

def _mlp(p, prefix: str, h: Node) -> Node:
    h = ad.tanh(_rowmul(h, p[prefix + "_W1"]) + p[prefix + "_b1"])
    return _rowmul(h, p[prefix + "_W2"]) + p[prefix + "_b2"]


class NeuralSSM(SsmModel):
    """Small-MLP SSM with a causal proposal ``q(z_t | z_{t-1}, x_t)``.

    The transition and proposal means are residual (``z_{t-1} + net(...)``),
    their log-scales come from a second output head.  The emission has an MLP
    mean and a state-independent learned log-scale.
    """

    kind = "neural"

    def __init__(self, d_z: int, d_x: int, hidden: int = 32, params=None):
        self.hidden = int(hidden)
        h = self.hidden
        entries = []
        for prefix, d_in, d_out in (("trans", d_z, 2 * d_z), ("emis", d_z, d_x),
                                    ("prop", d_z + d_x, 2 * d_z), ("init", d_x, 2 * d_z)):
            entries += [(prefix + "_W1", (h, d_in)), (prefix + "_b1", (h,)),
                        (prefix + "_W2", (d_out, h)), (prefix + "_b2", (d_out,))]
        entries += [("emis_log_sigma", (d_x,)), ("mu_f1", (d_z,)), ("log_sigma_f1", (d_z,))]
        super().__init__(d_z, d_x, ParamLayout(entries), params)

    def config(self) -> dict:
        return {**super().config(), "hidden": self.hidden}

    @classmethod
    def initialize(cls, d_z: int, d_x: int, hidden: int, rng: Rng,
                   log_sigma: float = math.log(0.1)) -> "NeuralSSM":
        """Uniform fan-in initialisation; output scales start near ``exp(log_sigma)``."""
        model = cls(d_z, d_x, hidden)
        g = rng.generator
        named = {}
        for name, shape in model.layout.shapes.items():
            if "_W" in name:
                bound = 1.0 / math.sqrt(shape[1])
                if name.endswith("W2"):
                    bound *= 0.1
                named[name] = g.uniform(-bound, bound, shape)
            else:
                named[name] = np.zeros(shape)
        for prefix in ("trans", "prop", "init"):
            named[prefix + "_b2"][d_z:] = log_sigma
        named["emis_log_sigma"][:] = log_sigma
        named["log_sigma_f1"][:] = 0.0
        model.params = model.layout.flatten(named)
        return model

    def _split(self, out: Node, base: Node | None):
        d = self.d_z
        mean = out[..., :d]
        if base is not None:
            mean = base + mean
        return GaussianDiag(mean, ad.exp(out[..., d:]))

    def initial_dist(self, p):
        return GaussianDiag(p["mu_f1"], ad.exp(p["log_sigma_f1"]))

    def transition_dist(self, p, history):
        z = history[-1]
        return self._split(_mlp(p, "trans", z), z)

    def emission_dist(self, p, z):
        return GaussianDiag(_mlp(p, "emis", z), ad.exp(p["emis_log_sigma"]))

    def proposal_initial(self, p, x):
        x1 = np.asarray(x)[:, None, 0, :]  # (B, 1, d_x)
        return self._split(_mlp(p, "init", Node(x1)), None)

    def proposal_dist(self, p, history, x, t):
        z = history[-1]
        xt = np.broadcast_to(np.asarray(x)[:, None, t, :], z.shape[:-1] + (self.d_x,))
        return self._split(_mlp(p, "prop", ad.concat([z, Node(xt)], axis=-1)), z)


MODEL_KINDS = {"lgssm": LinearGaussianSSM, "nonlinear_student": NonlinearStudentSSM,
               "neural": NeuralSSM}


def build_model(config: dict, params=None) -> SsmModel:
    """Reconstruct a model from :meth:`SsmModel.config` output."""
    kind = config["kind"]
    d_z, d_x = int(config["d_z"]), int(config["d_x"])
    if kind == "lgssm":
        return LinearGaussianSSM(d_z, d_x, params)
    if kind == "nonlinear_student":
        return NonlinearStudentSSM(d_z, d_x, params, df=float(config.get("df", 5.0)))
    if kind == "neural":
        return NeuralSSM(d_z, d_x, int(config.get("hidden", 32)), params)
    raise ValueError(f"unknown model kind {kind!r}")


# ------------------------------------------------------------- sampling

def simulate_arrays(model: SsmModel, T: int, B: int, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Ancestral samples from the generative model: ``(x (B,T,d_x), z (B,T,d_z))``."""
    if T < 1 or B < 1:
        raise ValueError("simulate needs T >= 1 and B >= 1")
    p = model.unpack()
    zs, xs = [], []
    history: list[Node] = []
    for t in range(T):
        dist = model.initial_dist(p) if t == 0 else model.transition_dist(p, history)
        z = dist.transform(dist.noise(rng, (B, model.d_z)))
        history.append(z)
        em = model.emission_dist(p, z)
        x = em.transform(em.noise(rng, (B, model.d_x)))
        zs.append(z.value)
        xs.append(x.value)
    return np.stack(xs, axis=1), np.stack(zs, axis=1)


# ---------------------------------------------------------- Kalman oracle

def _gaussian_logpdf(x, mean, cov) -> float:
    d = x.shape[-1]
    L = np.linalg.cholesky(cov)
    r = np.linalg.solve(L, x - mean)
    return float(-0.5 * r @ r - np.log(np.diag(L)).sum() - 0.5 * d * math.log(2 * math.pi))


def kalman_loglik(model: LinearGaussianSSM, x: np.ndarray) -> float:
    """Exact ``log p(x_{1:T})`` of the generative part via prediction errors."""
    n = model.named()
    A_f, A_g = n["A_f"], n["A_g"]
    Q = np.diag(np.exp(2 * n["log_sigma_f"]))
    R = np.diag(np.exp(2 * n["log_sigma_g"]))
    m = n["mu_f1"].copy()
    P = np.diag(np.exp(2 * n["log_sigma_f1"]))
    x = np.asarray(x, dtype=np.float64)
    total = 0.0
    for t in range(x.shape[0]):
        if t > 0:
            m = A_f @ m
            P = A_f @ P @ A_f.T + Q
        S = A_g @ P @ A_g.T + R
        S = 0.5 * (S + S.T)
        total += _gaussian_logpdf(x[t], A_g @ m, S)
        K = np.linalg.solve(S, A_g @ P).T
        m = m + K @ (x[t] - A_g @ m)
        P = P - K @ S @ K.T
        P = 0.5 * (P + P.T)
    return total


def kalman_filter(model: LinearGaussianSSM, x: np.ndarray):
    """Filtered means/covariances and one-step predictive moments of ``x``.

    Returns ``(means, covs, pred_x_mean, pred_x_cov)`` with the predictive
    entries for ``x_{t+1}`` given ``x_{1:t}`` (index ``t``).
    """
    n = model.named()
    A_f, A_g = n["A_f"], n["A_g"]
    Q = np.diag(np.exp(2 * n["log_sigma_f"]))
    R = np.diag(np.exp(2 * n["log_sigma_g"]))
    m = n["mu_f1"].copy()
    P = np.diag(np.exp(2 * n["log_sigma_f1"]))
    means, covs, px, pc = [], [], [], []
    for t in range(x.shape[0]):
        if t > 0:
            m = A_f @ m
            P = A_f @ P @ A_f.T + Q
        S = A_g @ P @ A_g.T + R
        K = np.linalg.solve(S, A_g @ P).T
        m = m + K @ (x[t] - A_g @ m)
        P = P - K @ S @ K.T
        means.append(m.copy())
        covs.append(P.copy())
        Pn = A_f @ P @ A_f.T + Q
        px.append(A_g @ A_f @ m)
        pc.append(A_g @ Pn @ A_g.T + R)
    return np.array(means), np.array(covs), np.array(px), np.array(pc)
