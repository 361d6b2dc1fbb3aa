"""
GMM Model Module

This module provides the 1-D Gaussian mixture used as the GrabCut data term: k-means++
seeding, log-space EM, and vectorized negative log-likelihoods.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy.special import logsumexp

from modules.image_grid import SeededRng

logger = logging.getLogger(__name__)

DEFAULT_VARIANCE_FLOOR = 1e-6
_LOG_2PI = np.log(2.0 * np.pi)


class GmmError(ValueError):
    """Raised when a mixture cannot be fitted or is invalid."""


@dataclass(frozen=True)
class GmmModel:
    """K-component mixture over scalar intensities."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.asarray(self.means, dtype=np.float64)
        var = np.asarray(self.variances, dtype=np.float64)
        if not (w.shape == mu.shape == var.shape) or w.ndim != 1 or w.size == 0:
            raise GmmError("weights, means and variances must be equal-length 1-D arrays")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise GmmError(f"weights must be non-negative and sum to 1, got sum {w.sum()!r}")
        if np.any(var <= 0) or not np.all(np.isfinite(mu)):
            raise GmmError("variances must be positive and means finite")
        for name, value in (('weights', w), ('means', mu), ('variances', var)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def component_count(self) -> int:
        return self.weights.size

    def component_log_densities(self, x: np.ndarray) -> np.ndarray:
        """log(w_k · N(x; μ_k, σ_k²)) with shape x.shape + (K,)."""
        x = np.asarray(x, dtype=np.float64)[..., None]
        with np.errstate(divide='ignore'):
            log_w = np.log(self.weights)
        return log_w - 0.5 * (_LOG_2PI + np.log(self.variances) + (x - self.means) ** 2 / self.variances)


def gmm_neg_log_likelihood(m: GmmModel, x) -> np.ndarray:
    """−log Σ_k w_k N(x; μ_k, σ_k²), elementwise over scalars or arrays."""
    result = -logsumexp(m.component_log_densities(x), axis=-1)
    return result if np.ndim(result) else float(result)


def mean_log_likelihood(m: GmmModel, samples: np.ndarray) -> float:
    return float(-np.mean(gmm_neg_log_likelihood(m, samples)))


def _kmeans_pp_centers(samples: np.ndarray, k: int, gen: np.random.Generator) -> np.ndarray:
    centers = [samples[gen.integers(samples.size)]]
    for _ in range(1, k):
        d2 = np.min((samples[:, None] - np.array(centers)[None, :]) ** 2, axis=1)
        total = d2.sum()
        if total <= 0.0:
            idx = gen.integers(samples.size)
        else:
            idx = gen.choice(samples.size, p=d2 / total)
        centers.append(samples[idx])
    return np.array(centers, dtype=np.float64)


def _em_step(samples: np.ndarray, model: GmmModel, variance_floor: float) -> GmmModel:
    log_joint = model.component_log_densities(samples)
    log_resp = log_joint - logsumexp(log_joint, axis=1, keepdims=True)
    resp = np.exp(log_resp)
    nk = resp.sum(axis=0)
    n = samples.size

    means = model.means.copy()
    variances = model.variances.copy()
    alive = nk > 0
    means[alive] = (resp[:, alive] * samples[:, None]).sum(axis=0) / nk[alive]
    sq = (samples[:, None] - means[None, :]) ** 2
    variances[alive] = (resp[:, alive] * sq[:, alive]).sum(axis=0) / nk[alive]
    variances = np.maximum(variances, variance_floor)
    weights = nk / n
    weights = weights / weights.sum()
    return GmmModel(weights, means, variances)


def fit_gmm_with_trace(samples, K: int, em_iterations: int, rng: SeededRng,
                       variance_floor: float = DEFAULT_VARIANCE_FLOOR,
                       init: Optional[GmmModel] = None) -> Tuple[GmmModel, List[float]]:
    """
    Fit a 1-D mixture by EM and record the mean log-likelihood after each step.

    Args:
        samples: Scalar observations
        K: Component count
        em_iterations: Number of EM steps
        rng: Seed source for k-means++ initialization (ignored on a warm start)
        variance_floor: Lower bound applied to every variance
        init: Optional warm-start model with K components

    Returns:
        (fitted model with components sorted by mean, log-likelihood trace starting at the
        initial model)
    """
    samples = np.asarray(samples, dtype=np.float64).ravel()
    if K < 1:
        raise GmmError(f"component count must be >= 1, got {K}")
    if init is None:
        if samples.size < K:
            raise GmmError(f"insufficient samples: {samples.size} for {K} components")
        centers = _kmeans_pp_centers(samples, K, rng.generator)
        spread = max(float(samples.var()), variance_floor)
        model = GmmModel(np.full(K, 1.0 / K), centers, np.full(K, spread))
    else:
        if init.component_count != K:
            raise GmmError(f"warm start has {init.component_count} components, expected {K}")
        if samples.size == 0:
            raise GmmError("insufficient samples: 0 for warm start")
        model = init

    trace = [mean_log_likelihood(model, samples)]
    for step in range(em_iterations):
        model = _em_step(samples, model, variance_floor)
        trace.append(mean_log_likelihood(model, samples))
        logger.debug("EM step %d: mean log-likelihood %.6f", step + 1, trace[-1])

    order = np.argsort(model.means, kind='stable')
    model = GmmModel(model.weights[order], model.means[order], model.variances[order])
    return model, trace


def fit_gmm(samples, K: int, em_iterations: int, rng: SeededRng,
            variance_floor: float = DEFAULT_VARIANCE_FLOOR,
            init: Optional[GmmModel] = None) -> GmmModel:
    model, _ = fit_gmm_with_trace(samples, K, em_iterations, rng, variance_floor, init)
    return model
