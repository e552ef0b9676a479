"""Diagonal Gaussian and Student-t distributions with pathwise sampling."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Node

LOG_2PI = math.log(2.0 * math.pi)


class Rng:
    """Counter-based (Philox) random stream that can be split deterministically.

    ``Rng(seed).child("enko", 3)`` always yields the same stream regardless of
    what else has been drawn from the parent, so independent consumers never
    depend on evaluation order.
    """

    def __init__(self, seed=0, _seq: np.random.SeedSequence | None = None):
        self._seq = _seq if _seq is not None else np.random.SeedSequence(seed)
        self._gen = np.random.Generator(np.random.Philox(self._seq))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def split(self, n: int) -> list["Rng"]:
        return [Rng(_seq=s) for s in self._seq.spawn(n)]

    def child(self, *keys) -> "Rng":
        key = tuple(self._seq.spawn_key) + tuple(_key_int(k) for k in keys)
        return Rng(_seq=np.random.SeedSequence(self._seq.entropy, spawn_key=key))

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, shape=None) -> np.ndarray:
        return self._gen.random(shape)

    def chisquare(self, df: float, shape) -> np.ndarray:
        return self._gen.chisquare(df, shape)


def _key_int(k) -> int:
    if isinstance(k, (int, np.integer)):
        return int(k)
    # stable across processes, unlike hash()
    return int.from_bytes(str(k).encode(), "little") % (2**63)


def _check_positive(scale: Node, what: str) -> None:
    if not np.all(scale.value > 0):
        raise ValueError(f"{what} must be elementwise positive")


class GaussianDiag:
    """Independent normal coordinates along the last axis."""

    def __init__(self, mean, std):
        self.loc = ad.as_node(mean)
        self.scale = ad.as_node(std)

    @classmethod
    def from_log_std(cls, mean, log_std) -> "GaussianDiag":
        return cls(mean, ad.exp(ad.as_node(log_std)))

    @property
    def mean(self) -> Node:
        return self.loc

    @property
    def std(self) -> Node:
        return self.scale

    def batch_shape(self) -> tuple[int, ...]:
        return np.broadcast_shapes(self.loc.shape, self.scale.shape)

    def logpdf(self, x) -> Node:
        """Log density summed over the last axis."""
        _check_positive(self.scale, "std")
        x = ad.as_node(x)
        r = (x - self.loc) / self.scale
        d = np.broadcast_shapes(x.shape, self.batch_shape())[-1]
        per = ad.square(r) * -0.5 - ad.log(self.scale)
        return ad.sum(per, axis=-1) - 0.5 * d * LOG_2PI

    def noise(self, rng: Rng, shape=None) -> np.ndarray:
        return rng.normal(shape or self.batch_shape())

    def transform(self, eps: np.ndarray) -> Node:
        return self.loc + self.scale * eps

    def rsample(self, rng: Rng, shape=None) -> Node:
        return self.transform(self.noise(rng, shape))


class StudentT:
    """Independent Student-t coordinates with fixed degrees of freedom."""

    def __init__(self, df: float, loc, scale):
        if df <= 0:
            raise ValueError("df must be positive")
        self.df = float(df)
        self.loc = ad.as_node(loc)
        self.scale = ad.as_node(scale)

    @property
    def mean(self) -> Node:
        return self.loc

    def variance(self) -> Node:
        if self.df <= 2:
            raise ValueError("variance is infinite for df <= 2")
        return ad.square(self.scale) * (self.df / (self.df - 2.0))

    def batch_shape(self) -> tuple[int, ...]:
        return np.broadcast_shapes(self.loc.shape, self.scale.shape)

    def log_normalizer(self) -> float:
        nu = self.df
        return math.lgamma(0.5 * (nu + 1)) - math.lgamma(0.5 * nu) - 0.5 * math.log(nu * math.pi)

    def logpdf(self, x) -> Node:
        _check_positive(self.scale, "scale")
        x = ad.as_node(x)
        nu = self.df
        r = (x - self.loc) / self.scale
        d = np.broadcast_shapes(x.shape, self.batch_shape())[-1]
        per = ad.log(ad.square(r) * (1.0 / nu) + 1.0) * (-0.5 * (nu + 1)) - ad.log(self.scale)
        return ad.sum(per, axis=-1) + d * self.log_normalizer()

    def noise(self, rng: Rng, shape=None) -> np.ndarray:
        shape = shape or self.batch_shape()
        eps = rng.normal(shape)
        chi = rng.chisquare(self.df, shape)
        return eps * np.sqrt(self.df / chi)

    def transform(self, eps: np.ndarray) -> Node:
        return self.loc + self.scale * eps

    def rsample(self, rng: Rng, shape=None) -> Node:
        return self.transform(self.noise(rng, shape))


def logpdf(dist, x) -> Node:
    return dist.logpdf(x)


def rsample(dist, rng: Rng, shape=None) -> Node:
    return dist.rsample(rng, shape)
