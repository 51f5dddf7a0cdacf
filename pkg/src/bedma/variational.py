"""Factorized Gaussian weight posteriors and the sampled KL penalty.

Each trainable array is a pair ``(mu, rho)`` with standard deviation
``softplus(rho)``.  A weight draw is ``mu + softplus(rho) * eps`` with
``eps ~ N(0, 1)`` taken from a :class:`NoiseSource`, so gradients reach
``mu`` and ``rho`` but not the noise.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class PriorSpec:
    mean: float = 0.0
    std: float = 1.0

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError(f"prior std must be positive, got {self.std}")


@dataclass
class GaussianVariational:
    mu: Tensor
    rho: Tensor
    label: str = ""

    def __post_init__(self):
        self.mu = ad.as_tensor(self.mu)
        self.rho = ad.as_tensor(self.rho)
        if self.mu.shape != self.rho.shape:
            raise ad.ShapeError(f"mu {self.mu.shape} and rho {self.rho.shape} differ")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mu.shape

    @property
    def sigma(self) -> np.ndarray:
        return np.logaddexp(0.0, self.rho.data)


def sigma_to_rho(sigma) -> np.ndarray:
    """Inverse softplus."""
    sigma = np.asarray(sigma, dtype=np.float64)
    return sigma + np.log(-np.expm1(-sigma))


def _label_key(label: str) -> int:
    return int.from_bytes(hashlib.blake2b(label.encode(), digest_size=8).digest(), "little")


def standard_normal(seed: int, label: str, index: int, shape) -> np.ndarray:
    """Draw number ``index`` of stream ``label`` under ``seed``; a pure function."""
    ss = np.random.SeedSequence(
        entropy=seed & 0xFFFF_FFFF_FFFF_FFFF, spawn_key=(_label_key(label), index)
    )
    return np.random.default_rng(ss).standard_normal(shape)


class NoiseSource:
    """Seeded standard-normal streams, one per parameter label.

    The k-th request on a label always returns the same array for a given
    seed, independent of what other labels have drawn.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._draws: dict[str, int] = {}

    def normal(self, label: str, shape) -> np.ndarray:
        index = self._draws.get(label, 0)
        self._draws[label] = index + 1
        return standard_normal(self.seed, label, index, shape)

    def spawn(self, k: int) -> "NoiseSource":
        """Independent child source, e.g. for the k-th Monte-Carlo pass."""
        child = np.random.SeedSequence(self.seed & 0xFFFF_FFFF_FFFF_FFFF, spawn_key=(k,))
        return NoiseSource(int(child.generate_state(2, np.uint64)[0]))


class FixedNoise(NoiseSource):
    """Every draw is the constant ``value``; ``FixedNoise(0.0)`` collapses sampling to the mean."""

    def __init__(self, value: float = 0.0):
        super().__init__(0)
        self.value = float(value)

    def normal(self, label: str, shape) -> np.ndarray:
        return np.full(shape, self.value)


ZERO_NOISE = FixedNoise(0.0)


def _sample(gv: GaussianVariational, noise: NoiseSource) -> tuple[Tensor, Tensor]:
    eps = Tensor(noise.normal(gv.label, gv.shape))
    sigma = ad.softplus(gv.rho)
    return ad.add(gv.mu, ad.mul(sigma, eps)), sigma


def sample_weight(gv: GaussianVariational, noise: NoiseSource) -> Tensor:
    return _sample(gv, noise)[0]


def log_prob_gaussian(x, mean, std) -> Tensor:
    """Summed elementwise log N(x; mean, std)."""
    x = ad.as_tensor(x)
    if isinstance(std, Tensor):
        if np.any(std.data <= 0):
            raise ValueError("std must be positive")
    elif not std > 0:
        raise ValueError(f"std must be positive, got {std}")

    diff = ad.shift(x, -mean) if isinstance(mean, (int, float)) else ad.sub(x, mean)
    if isinstance(std, (int, float)):
        quad = ad.scale(ad.sum(ad.square(diff)), -0.5 / std**2)
        return ad.shift(quad, -x.size * (0.5 * LOG_2PI + math.log(std)))
    quad = ad.scale(ad.sum(ad.div(ad.square(diff), ad.square(std))), -0.5)
    return ad.shift(ad.sub(quad, ad.sum(ad.log(std))), -0.5 * LOG_2PI * x.size)


def kl_sample_term(w: Tensor, gv: GaussianVariational, prior: PriorSpec = PriorSpec(),
                   sigma: Tensor | None = None) -> Tensor:
    """Single-sample estimate log q(w) - log p(w).

    Recorded as one tape node; equal to the difference of two
    :func:`log_prob_gaussian` calls.
    """
    if sigma is None:
        sigma = ad.softplus(gv.rho)
    w, mu = ad.as_tensor(w), gv.mu
    s = sigma.data
    dq = w.data - mu.data
    dp = w.data - prior.mean
    pv = prior.std**2
    value = np.sum(-np.log(s) - 0.5 * dq * dq / (s * s) + 0.5 * dp * dp / pv) + w.size * math.log(prior.std)

    def fn(g):
        a = dq / (s * s)
        return g * (dp / pv - a), g * a, g * (dq * a - 1.0) / s

    return ad.custom_op("gaussian_log_ratio", (w, mu, sigma), value, fn)


def kl_closed_form(gv: GaussianVariational, prior: PriorSpec = PriorSpec()) -> float:
    if not prior.std > 0:
        raise ValueError("prior std must be positive")
    mu = gv.mu.data
    var = gv.sigma**2
    pv = prior.std**2
    return float(np.sum(0.5 * ((var + (mu - prior.mean) ** 2) / pv - 1.0 - np.log(var / pv))))


@dataclass
class KLAccumulator:
    """Collects the KL terms produced while sampling during one forward pass."""

    prior: PriorSpec = field(default_factory=PriorSpec)
    terms: list = field(default_factory=list)

    def sample(self, gv: GaussianVariational, noise: NoiseSource) -> Tensor:
        w, sigma = _sample(gv, noise)
        self.terms.append(kl_sample_term(w, gv, self.prior, sigma))
        return w

    def total(self) -> Tensor:
        if not self.terms:
            return Tensor(0.0)
        out = self.terms[0]
        for term in self.terms[1:]:
            out = ad.add(out, term)
        return out


def draw(gv: GaussianVariational, noise: NoiseSource, kl: KLAccumulator | None) -> Tensor:
    return sample_weight(gv, noise) if kl is None else kl.sample(gv, noise)


def glorot_limit(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_variational(shape, fan_in: int, fan_out: int, rng: np.random.Generator,
                     sigma0: float = 0.05, scheme: str = "glorot", bias: bool = False):
    """Initial ``(mu, rho)`` arrays.

    ``scheme="glorot"`` draws mu uniformly in the Glorot range (zeros for
    biases) with a small constant sigma0.  ``scheme="standard-normal"``
    starts every posterior at N(0, 1).
    """
    if scheme == "standard-normal":
        return np.zeros(shape), np.full(shape, sigma_to_rho(1.0))
    if scheme != "glorot":
        raise ValueError(f"unknown init scheme {scheme!r}")
    if bias:
        mu = np.zeros(shape)
    else:
        k = glorot_limit(fan_in, fan_out)
        mu = rng.uniform(-k, k, size=shape)
    return mu, np.full(shape, float(sigma_to_rho(sigma0)))
