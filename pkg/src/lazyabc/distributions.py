"""Priors and importance (proposal) densities over parameter vectors.

A distribution exposes ``log_pdf(theta) -> float`` and
``sample(rng) -> ndarray``.  ``DensityPair`` bundles a prior with a
proposal and computes the weight ratio prior/proposal; the proposal
must dominate the prior (positive wherever the prior is).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp


class SupportError(ValueError):
    """Proposal density vanishes at a point with positive prior mass."""


@dataclass(frozen=True)
class GammaPrior:
    """Gamma(shape, rate) prior on a single positive parameter."""

    shape: float
    rate: float = 1.0

    def __post_init__(self):
        if self.shape <= 0 or self.rate <= 0:
            raise ValueError("shape and rate must be positive")

    def log_pdf(self, theta) -> float:
        x = float(np.asarray(theta).ravel()[0])
        if x <= 0:
            return -math.inf
        a, b = self.shape, self.rate
        return a * math.log(b) - math.lgamma(a) + (a - 1.0) * math.log(x) - b * x

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return np.array([rng.gamma(self.shape, 1.0 / self.rate)])

    @property
    def dim(self) -> int:
        return 1


@dataclass(frozen=True, eq=False)
class UniformBox:
    """Uniform prior on an axis-aligned box."""

    low: tuple[float, ...]
    high: tuple[float, ...]

    def __post_init__(self):
        if len(self.low) != len(self.high):
            raise ValueError("low and high must have equal length")
        if any(h <= l for l, h in zip(self.low, self.high)):
            raise ValueError("box must have positive volume")

    @property
    def dim(self) -> int:
        return len(self.low)

    @property
    def _log_volume(self) -> float:
        return float(sum(math.log(h - l) for l, h in zip(self.low, self.high)))

    def contains(self, theta) -> bool:
        t = np.asarray(theta, dtype=float).ravel()
        return bool(
            np.all(t >= np.asarray(self.low)) and np.all(t <= np.asarray(self.high))
        )

    def log_pdf(self, theta) -> float:
        return -self._log_volume if self.contains(theta) else -math.inf

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.low, self.high)


@dataclass(frozen=True, eq=False)
class GaussianMixtureProposal:
    """Equally weighted Gaussian mixture truncated to a box.

    Used as an importance density built from the good draws of an
    earlier run: components are centred at a subsample of those draws
    with a shared diagonal covariance of twice their empirical
    variance.  The truncation constant is estimated once by Monte
    Carlo at construction and treated as fixed thereafter.
    """

    means: np.ndarray  # (m, p)
    variances: np.ndarray  # (p,) shared diagonal covariance
    box: UniformBox
    log_truncation: float  # log of the mixture mass inside the box

    @classmethod
    def from_samples(
        cls,
        samples: np.ndarray,
        box: UniformBox,
        *,
        n_components: int = 200,
        var_scale: float = 2.0,
        seed: int = 0,
        n_normalization: int = 200_000,
    ) -> "GaussianMixtureProposal":
        samples = np.atleast_2d(np.asarray(samples, dtype=float))
        if len(samples) < 2:
            raise ValueError("need at least two sample points")
        rng = np.random.default_rng(seed)
        m = min(n_components, len(samples))
        idx = rng.choice(len(samples), size=m, replace=False)
        means = samples[idx]
        variances = var_scale * samples.var(axis=0, ddof=1)
        variances = np.maximum(variances, 1e-12)
        # Mass of the untruncated mixture inside the box, by Monte Carlo.
        comp = rng.integers(0, m, size=n_normalization)
        draws = means[comp] + rng.standard_normal(
            (n_normalization, means.shape[1])
        ) * np.sqrt(variances)
        lo = np.asarray(box.low)
        hi = np.asarray(box.high)
        inside = np.all((draws >= lo) & (draws <= hi), axis=1)
        frac = inside.mean()
        if frac <= 0:
            raise ValueError("mixture places no mass inside the box")
        return cls(means, variances, box, math.log(frac))

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def log_pdf(self, theta) -> float:
        t = np.asarray(theta, dtype=float).ravel()
        if not self.box.contains(t):
            return -math.inf
        diff = t[None, :] - self.means
        quad = (diff * diff / self.variances).sum(axis=1)
        log_comp = -0.5 * quad - 0.5 * np.log(2.0 * np.pi * self.variances).sum()
        return float(logsumexp(log_comp) - math.log(len(self.means)) - self.log_truncation)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        # Rejection into the box; geometric number of proposals.
        while True:
            k = rng.integers(0, len(self.means))
            draw = self.means[k] + rng.standard_normal(self.dim) * np.sqrt(
                self.variances
            )
            if self.box.contains(draw):
                return draw


@dataclass(frozen=True, eq=False)
class DensityPair:
    """Prior plus importance density over the parameter space."""

    prior: object
    proposal: object = None
    _same: bool = field(default=False, repr=False)

    def __post_init__(self):
        if self.proposal is None:
            object.__setattr__(self, "proposal", self.prior)
        object.__setattr__(self, "_same", self.proposal is self.prior)

    @classmethod
    def rejection(cls, prior) -> "DensityPair":
        """Pair using the prior itself as proposal (weights in {0, u=1})."""
        return cls(prior, prior)

    @property
    def is_rejection(self) -> bool:
        return self._same

    def sample_proposal(self, rng: np.random.Generator) -> np.ndarray:
        return np.asarray(self.proposal.sample(rng), dtype=float).ravel()

    def log_ratio(self, theta) -> float:
        """log prior(theta) - log proposal(theta)."""
        if self._same:
            return 0.0
        lp = self.prior.log_pdf(theta)
        lg = self.proposal.log_pdf(theta)
        if lp == -math.inf:
            return -math.inf
        if lg == -math.inf:
            raise SupportError(
                "proposal density is zero at a point with positive prior density"
            )
        return lp - lg

    def ratio(self, theta) -> float:
        lr = self.log_ratio(theta)
        if lr == -math.inf:
            return 0.0
        return math.exp(lr)
