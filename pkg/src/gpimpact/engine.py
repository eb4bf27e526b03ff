"""Exact Gaussian-process inference on stacked multi-series observations.

All linear algebra goes through one cached Cholesky factorization of the
observation covariance; nothing forms an explicit inverse. A small jitter
ladder keeps nearly singular covariances factorizable and reports the
jitter it had to add.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular
from scipy.stats import norm

from .coregional import (
    MogpStructure,
    assemble_covariance,
    covariance_grad,
    cross_covariance,
    noise_diagonal,
    term_grams,
)
from .dataset import HeterotopicDataset, TaggedInputs, fmt_float

_LOG_2PI = float(np.log(2.0 * np.pi))


class FactorizationError(RuntimeError):
    """Covariance could not be factorized even at the maximum jitter."""


def jittered_cholesky(sigma: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of sigma, adding diagonal jitter only on failure.

    The first attempt uses no jitter. On failure, jitter starts at
    1e-8 * mean(diag) and escalates tenfold up to 1e-2 * mean(diag).

    Returns
    -------
    (L, jitter) : lower-triangular factor of sigma + jitter * I, and the
        jitter actually used.
    """
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise ValueError(f"covariance must be square, got {sigma.shape}")
    if not np.all(np.isfinite(sigma)):
        raise FactorizationError("covariance contains non-finite entries")
    scale = float(np.mean(np.diag(sigma)))
    jitter = 0.0
    while True:
        try:
            l = cholesky(sigma + jitter * np.eye(len(sigma)) if jitter else sigma,
                         lower=True, check_finite=False)
            return l, jitter
        except LinAlgError:
            if jitter == 0.0:
                jitter = 1e-8 * scale
            else:
                jitter *= 10.0
            if not jitter > 0 or jitter > 1e-2 * scale:
                raise FactorizationError(
                    f"covariance not positive definite within jitter budget "
                    f"(scale {scale:.3g})") from None


def _lml_terms(y: np.ndarray, l: np.ndarray, alpha: np.ndarray) -> float:
    return float(-0.5 * y @ alpha - np.sum(np.log(np.diag(l))) - 0.5 * len(y) * _LOG_2PI)


def log_marginal_likelihood(y: np.ndarray, sigma: np.ndarray) -> float:
    """Zero-mean Gaussian log marginal likelihood of y under sigma."""
    y = np.asarray(y, dtype=float)
    l, _ = jittered_cholesky(sigma)
    alpha = cho_solve((l, True), y, check_finite=False)
    return _lml_terms(y, l, alpha)


@dataclass
class PredictiveDistribution:
    """Joint Gaussian over test outputs."""

    mean: np.ndarray
    cov: np.ndarray

    @property
    def sd(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))

    def interval(self, level: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
        z = norm.ppf(0.5 + level / 2.0)
        return self.mean - z * self.sd, self.mean + z * self.sd

    def to_csv(self, path, times: np.ndarray, series_ids: list[str],
               level: float = 0.95) -> None:
        lo, hi = self.interval(level)
        pct = 100.0 * (1.0 - level) / 2.0
        cols = ["time", "series", "mean", "sd", f"q{pct:g}", f"q{100 - pct:g}"]
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for k in range(len(self.mean)):
                fh.write(",".join([fmt_float(times[k]), str(series_ids[k]),
                                   fmt_float(self.mean[k]), fmt_float(self.sd[k]),
                                   fmt_float(lo[k]), fmt_float(hi[k])]) + "\n")


def sample_predictive(dist: PredictiveDistribution, n: int,
                      rng: np.random.Generator | int) -> np.ndarray:
    """Joint draws from the predictive, robust to rank-deficient covariance.

    Negative eigenvalues from roundoff are clamped to zero, so degenerate
    directions come back exactly at the mean.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    cov = (dist.cov + dist.cov.T) / 2.0
    w, v = np.linalg.eigh(cov)
    root = v * np.sqrt(np.clip(w, 0.0, None))
    z = rng.standard_normal((n, len(dist.mean)))
    return dist.mean[None, :] + z @ root.T


class FittedGp:
    """A structure conditioned on a panel: cached factorization and solves.

    Parameters are taken from the structure as passed; call sites that
    optimize hyperparameters should set them before construction.
    """

    def __init__(self, structure: MogpStructure, data: HeterotopicDataset | TaggedInputs,
                 y: np.ndarray | None = None):
        self.structure = structure
        if isinstance(data, HeterotopicDataset):
            self.dataset: HeterotopicDataset | None = data
            self.tagged = data.tagged_inputs()
            self.y = data.stacked_y()
        else:
            if y is None:
                raise ValueError("tagged inputs need an explicit y vector")
            self.dataset = None
            self.tagged = data
            self.y = np.asarray(y, dtype=float)
        self.grams = term_grams(structure, self.tagged)
        kern = assemble_covariance(structure, self.tagged, self.grams)
        self.sigma = kern + np.diag(noise_diagonal(structure, self.tagged))
        self.chol, self.jitter = jittered_cholesky(self.sigma)
        self.alpha = cho_solve((self.chol, True), self.y, check_finite=False)
        self.log_ml = _lml_terms(self.y, self.chol, self.alpha)
        self._w: np.ndarray | None = None

    @property
    def total_T(self) -> int:
        return len(self.y)

    def _weight_matrix(self) -> np.ndarray:
        # alpha alpha' - Sigma^{-1}; the inverse comes from the cached
        # factor, not an explicit inversion routine
        if self._w is None:
            inv = cho_solve((self.chol, True), np.eye(self.total_T), check_finite=False)
            self._w = np.outer(self.alpha, self.alpha) - inv
        return self._w

    def gradient(self, names: list[str] | None = None) -> np.ndarray:
        """Gradient of the log marginal likelihood wrt named free parameters."""
        names = self.structure.free_param_names() if names is None else names
        w = self._weight_matrix()
        out = np.empty(len(names))
        for i, name in enumerate(names):
            ds = covariance_grad(self.structure, self.tagged, name, self.grams)
            out[i] = 0.5 * float(np.sum(w * ds))
        return out

    def predictive(self, test: TaggedInputs, include_noise: bool = False) -> PredictiveDistribution:
        """Posterior over test rows; optionally adds observation noise."""
        k_cross = cross_covariance(self.structure, test, self.tagged)
        k_test = cross_covariance(self.structure, test, test)
        mean = k_cross @ self.alpha
        v = solve_triangular(self.chol, k_cross.T, lower=True, check_finite=False)
        cov = k_test - v.T @ v
        if include_noise:
            cov = cov + np.diag(noise_diagonal(self.structure, test))
        return PredictiveDistribution(mean, cov)


def fit_gp(structure: MogpStructure, data: HeterotopicDataset) -> FittedGp:
    return FittedGp(structure, data)


def lml_gradient(fitted: FittedGp, names: list[str] | None = None) -> np.ndarray:
    return fitted.gradient(names)


def posterior_predictive(fitted: FittedGp, test: TaggedInputs,
                         include_noise: bool = False) -> PredictiveDistribution:
    return fitted.predictive(test, include_noise)
