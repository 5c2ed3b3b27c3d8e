"""Closed-form Gaussian world for checking the sampler, loss and denoisers.

With a diagonal Gaussian prior N(m, s^2) and noise level sigma, the ideal
denoiser is the posterior mean (s^2 x + sigma^2 m) / (s^2 + sigma^2) and the
score of the perturbed marginal is (m - x) / (s^2 + sigma^2).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import ndtr

from .cohort import N_ROI
from .denoiser import COND_CHANNELS
from .diffusion import DiffusionConfig, PairArrays, sample_ode
from .rng import substream


@dataclass
class GaussianPrior:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.broadcast_to(np.asarray(self.std, dtype=np.float64), self.mean.shape).copy()
        if np.any(self.std < 0):
            raise ValueError("prior std must be non-negative")

    @classmethod
    def standard(cls, dim: int = N_ROI) -> "GaussianPrior":
        return cls(np.zeros(dim), np.ones(dim))

    @classmethod
    def point_mass(cls, mean) -> "GaussianPrior":
        mean = np.asarray(mean, dtype=np.float64)
        return cls(mean, np.zeros_like(mean))


def analytic_denoiser(prior: GaussianPrior, x, sigma):
    """Posterior mean E[x0 | x] under N(m, s^2) observed with noise sigma."""
    s2 = prior.std ** 2
    v = np.asarray(sigma, dtype=np.float64) ** 2
    if np.ndim(v):
        v = v.reshape((-1,) + (1,) * (np.ndim(x) - 1))
    denom = s2 + v
    safe = np.where(denom > 0, denom, 1.0)
    # sigma = 0 returns x untouched rather than (s^2 x) / s^2, which can round
    return np.where((v == 0) | (denom == 0), x, (s2 * x + v * prior.mean) / safe)


def analytic_score(prior: GaussianPrior, x, sigma):
    """Gradient of log N(x; m, s^2 + sigma^2)."""
    denom = prior.std ** 2 + np.asarray(sigma, dtype=np.float64) ** 2
    if np.any(denom == 0):
        raise ValueError("score undefined when both prior std and sigma are zero")
    return (prior.mean - x) / denom


def oracle_denoise_fn(prior: GaussianPrior) -> Callable:
    return lambda x, sigma: analytic_denoiser(prior, x, sigma)


def oracle_sample(prior: GaussianPrior, steps: int, n_samples: int, seed: int = 0,
                  config: DiffusionConfig | None = None, method: str = "heun") -> np.ndarray:
    """Run the production ODE sampler with the exact denoiser; (n_samples, dim)."""
    if steps < 2:
        raise ValueError("steps must be >= 2")
    config = config or DiffusionConfig()
    z = substream(seed, "oracle").standard_normal((n_samples, prior.mean.size))
    return sample_ode(oracle_denoise_fn(prior), z, config, steps, method)


def ks_statistic(samples, cdf: Callable) -> float:
    """Two-sided Kolmogorov-Smirnov distance between the ECDF and ``cdf``."""
    x = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    n = x.size
    if n < 2:
        raise ValueError("need at least two samples")
    f = cdf(x)
    d_plus = np.max(np.arange(1, n + 1) / n - f)
    d_minus = np.max(f - np.arange(n) / n)
    return float(max(d_plus, d_minus))


def normal_cdf(mean: float = 0.0, std: float = 1.0) -> Callable:
    return lambda x: ndtr((np.asarray(x) - mean) / std)


def point_mass_exact(prior_mean, s: float, x_T, sigma_T: float):
    """Exact probability-flow endpoint for N(m, s^2) started at x_T at level sigma_T.

    Along the flow, (x - m) / sqrt(s^2 + sigma^2) is constant.
    """
    return prior_mean + (x_T - prior_mean) * s / np.sqrt(s * s + sigma_T * sigma_T)


@dataclass
class ConditionalGaussianTask:
    """A conditional Gaussian world in the denoiser's input layout.

    Condition channel 0 carries a per-position pattern p ~ N(0, 1); the clean
    signal is x0 = p + prior_std * eps, so the exact conditional denoiser is
    known for every (x, sigma, condition).
    """
    prior_std: float = 0.5
    dim: int = N_ROI

    def conditions(self, n: int, rng: np.random.Generator) -> np.ndarray:
        cond = np.zeros((n, COND_CHANNELS, self.dim))
        cond[:, 0] = rng.standard_normal((n, self.dim))
        cond[:, 3] = 1.0
        return cond

    def prior(self, cond: np.ndarray) -> GaussianPrior:
        return GaussianPrior(cond[..., 0, :], np.full(cond[..., 0, :].shape, self.prior_std))

    def draw(self, n: int, rng: np.random.Generator) -> PairArrays:
        cond = self.conditions(n, rng)
        x0 = cond[:, 0] + self.prior_std * rng.standard_normal((n, self.dim))
        return PairArrays(x0, cond)

    def posterior_mean(self, x: np.ndarray, sigma, cond: np.ndarray) -> np.ndarray:
        return analytic_denoiser(self.prior(cond), x, sigma)
