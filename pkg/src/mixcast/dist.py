"""Base distributions and the equal-weight mixture built from stochastic draws.

A forecast is a set of k draws of per-horizon sufficient statistics; the
predictive density is the average of the k component densities, and the
marginal CDF per horizon is the average of the component CDFs.  Horizons are
treated as independent within each component, so a component's joint
log-density is the sum of its per-horizon log-densities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import erf, logsumexp as _np_logsumexp

LOG2PI = math.log(2.0 * math.pi)


class BaseKind(Enum):
    """Component family of the mixture."""

    GAUSSIAN = "gaussian"
    LAPLACE = "laplace"


@dataclass
class SufficientStats:
    """Per-horizon mean and log-scale from one stochastic forward pass.

    ``log_scale`` is log variance for the Gaussian family and log of the
    scale b for Laplace; exponentiation keeps the scale positive by
    construction.
    """

    mean: np.ndarray
    log_scale: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64)
        if self.mean.ndim != 1 or self.mean.shape != self.log_scale.shape:
            raise ValueError("mean and log_scale must be equal-length vectors")

    @property
    def horizons(self) -> int:
        return self.mean.shape[0]


@dataclass
class MixtureSample:
    """The k sufficient-statistic draws defining one predictive distribution."""

    draws: list

    def __post_init__(self):
        if len(self.draws) < 1:
            raise ValueError("a mixture needs at least one draw")
        t = self.draws[0].horizons
        if any(d.horizons != t for d in self.draws):
            raise ValueError("all draws must share the horizon count")

    @property
    def k(self) -> int:
        return len(self.draws)

    @property
    def horizons(self) -> int:
        return self.draws[0].horizons

    def means(self) -> np.ndarray:
        """(k, T) matrix of draw means."""
        return np.stack([d.mean for d in self.draws])

    def log_scales(self) -> np.ndarray:
        return np.stack([d.log_scale for d in self.draws])


def base_log_pdf(kind: BaseKind, y, mean, log_scale):
    """Elementwise log-density of the base family."""
    y = np.asarray(y, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    log_scale = np.asarray(log_scale, dtype=np.float64)
    if kind is BaseKind.GAUSSIAN:
        return -0.5 * (LOG2PI + log_scale) - 0.5 * (y - mean) ** 2 * np.exp(-log_scale)
    b = np.exp(log_scale)
    return -math.log(2.0) - log_scale - np.abs(y - mean) / b


def base_cdf(kind: BaseKind, y, mean, log_scale):
    """Elementwise CDF of the base family."""
    y = np.asarray(y, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    log_scale = np.asarray(log_scale, dtype=np.float64)
    if kind is BaseKind.GAUSSIAN:
        sigma = np.exp(0.5 * log_scale)
        return 0.5 * (1.0 + erf((y - mean) / (sigma * math.sqrt(2.0))))
    b = np.exp(log_scale)
    z = (y - mean) / b
    tail = 0.5 * np.exp(-np.abs(z))
    return np.where(z < 0.0, tail, 1.0 - tail)


def component_variance(kind: BaseKind, log_scale):
    """Variance of one component given its log-scale."""
    if kind is BaseKind.GAUSSIAN:
        return np.exp(np.asarray(log_scale, dtype=np.float64))
    b = np.exp(np.asarray(log_scale, dtype=np.float64))
    return 2.0 * b * b


def mixture_log_pdf(sample: MixtureSample, y, kind: BaseKind = BaseKind.GAUSSIAN) -> float:
    """Joint log-density of the equal-weight mixture at target vector y.

    Each draw contributes the product of its per-horizon densities; the
    mixture is their average: logsumexp_j(sum_h log p(y_h; draw_j)) - log k.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (sample.horizons,):
        raise ValueError(f"target length {y.shape} != horizons {sample.horizons}")
    per_draw = np.array([
        np.sum(base_log_pdf(kind, y, d.mean, d.log_scale)) for d in sample.draws
    ])
    return float(_np_logsumexp(per_draw) - math.log(sample.k))


def mixture_marginal_log_pdf(sample: MixtureSample, horizon: int, y,
                             kind: BaseKind = BaseKind.GAUSSIAN):
    """Log of the marginal mixture density at one horizon (1-based)."""
    _check_horizon(sample, horizon)
    h = horizon - 1
    y = np.asarray(y, dtype=np.float64)
    per_draw = np.stack([
        base_log_pdf(kind, y, d.mean[h], d.log_scale[h]) for d in sample.draws
    ])
    return _np_logsumexp(per_draw, axis=0) - math.log(sample.k)


def mixture_cdf(sample: MixtureSample, horizon: int, y,
                kind: BaseKind = BaseKind.GAUSSIAN):
    """Marginal mixture CDF at one horizon (1-based): mean of component CDFs."""
    _check_horizon(sample, horizon)
    h = horizon - 1
    y = np.asarray(y, dtype=np.float64)
    acc = np.zeros_like(y, dtype=np.float64)
    for d in sample.draws:
        acc += base_cdf(kind, y, d.mean[h], d.log_scale[h])
    out = acc / sample.k
    return float(out) if out.ndim == 0 else out


def mixture_variance(sample: MixtureSample, horizon: int,
                     kind: BaseKind = BaseKind.GAUSSIAN) -> float:
    """Variance of the marginal mixture at one horizon (law of total variance)."""
    _check_horizon(sample, horizon)
    h = horizon - 1
    mu = sample.means()[:, h]
    var = component_variance(kind, sample.log_scales()[:, h])
    return float(np.mean(var + mu ** 2) - np.mean(mu) ** 2)


def sharpness(samples, horizon: int, kind: BaseKind = BaseKind.GAUSSIAN) -> float:
    """Mean predictive variance at a horizon over a collection of mixtures."""
    samples = list(samples)
    if not samples:
        raise ValueError("sharpness of an empty collection")
    return float(np.mean([mixture_variance(s, horizon, kind) for s in samples]))


def gaussian_mle_variance(residuals) -> float:
    """Maximum-likelihood variance: mean of squared residuals over all entries."""
    r = np.asarray(residuals, dtype=np.float64)
    if r.size == 0:
        raise ValueError("variance of no residuals")
    return float(np.mean(r ** 2))


def gaussian_avg_loglik(sigma2_mle: float, horizons: int) -> float:
    """Average log-likelihood of a constant-variance Gaussian forecaster.

    Equals -T/2 - (T/2) log(2 pi sigma^2), the closed form obtained by
    plugging the MLE variance back into the average Gaussian log-density.
    """
    if horizons == 0:
        return 0.0
    if sigma2_mle <= 0.0:
        raise ValueError(f"variance must be positive, got {sigma2_mle}")
    return -horizons / 2.0 - (horizons / 2.0) * math.log(2.0 * math.pi * sigma2_mle)


def _check_horizon(sample: MixtureSample, horizon: int):
    if not 1 <= horizon <= sample.horizons:
        raise ValueError(f"horizon {horizon} out of range 1..{sample.horizons}")
