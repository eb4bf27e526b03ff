"""Hamiltonian Monte Carlo over coregionalization loadings.

After a type-II maximum likelihood fit, the mixing loadings (and
optionally the per-series noise variances) get a posterior instead of a
point estimate. The sampler is plain HMC: leapfrog trajectories with a
Metropolis correction, identity mass by default. Kernel hyperparameters
and coregionalization nuggets stay fixed at their fitted values, which
keeps every target evaluation a cheap reassembly of cached Gram blocks.

Noise variances are sampled on the log scale so trajectories can never
leave the positive half-line.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.fft import next_fast_len, rfft, irfft
from scipy.linalg import cho_solve

from .coregional import (
    MogpStructure,
    assemble_covariance,
    covariance_grad,
    noise_diagonal,
    term_grams,
)
from .dataset import HeterotopicDataset, TaggedInputs
from .engine import (
    FactorizationError,
    FittedGp,
    PredictiveDistribution,
    jittered_cholesky,
    sample_predictive,
    _lml_terms,
)


@dataclass
class PriorSpec:
    """Priors for the sampled parameters.

    Loadings get independent zero-mean normals. Noise variances get a
    Gamma prior parameterized by shape and rate; its density is applied
    through the log transform used for sampling.
    """

    loading_sd: float = 10.0
    noise_shape: float = 0.1
    noise_rate: float = 1.0

    def loading_logp(self, lam):
        v = -0.5 * float(np.sum(lam * lam)) / self.loading_sd ** 2
        g = -lam / self.loading_sd ** 2
        return v, g

    def log_noise_logp(self, zeta):
        """Log density of log-variance when the variance is Gamma."""
        omega2 = np.exp(zeta)
        v = float(np.sum(self.noise_shape * zeta - self.noise_rate * omega2))
        g = self.noise_shape - self.noise_rate * omega2
        return v, g


@dataclass
class HmcConfig:
    step_size: float = 0.01
    n_leapfrog: int = 20
    n_samples: int = 5000
    burn_in: float = 0.2
    mass: np.ndarray | None = None  # diagonal of the mass matrix


@dataclass
class HmcResult:
    samples: np.ndarray      # kept draws, one row per iteration after burn-in
    log_probs: np.ndarray
    accept_rate: float
    n_divergent: int
    ess: np.ndarray          # per-coordinate effective sample size

    @property
    def n_kept(self) -> int:
        return self.samples.shape[0]


def leapfrog(target, x, p, step_size, n_steps, mass_inv=None, grad=None):
    """Integrate Hamiltonian dynamics for a log-density target.

    Returns (x, p, logp, grad) at the endpoint. A non-finite density or
    gradient along the way ends the trajectory early with logp -inf,
    which the caller treats as a divergence.
    """
    x = np.asarray(x, dtype=float).copy()
    p = np.asarray(p, dtype=float).copy()
    if mass_inv is None:
        mass_inv = np.ones_like(x)
    if grad is None:
        _, grad = target(x)
    logp = -np.inf
    p = p + 0.5 * step_size * grad
    for step in range(n_steps):
        x = x + step_size * mass_inv * p
        logp, grad = target(x)
        if not (np.isfinite(logp) and np.all(np.isfinite(grad))):
            return x, p, -np.inf, np.zeros_like(x)
        p = p + (1.0 if step < n_steps - 1 else 0.5) * step_size * grad
    return x, p, logp, grad


def hmc_sample(target, x0, config: HmcConfig | None = None, rng=None) -> HmcResult:
    """Sample from a log-density with gradient using HMC.

    Parameters
    ----------
    target : callable
        x -> (log density, gradient).
    x0 : ndarray
        Starting point; must have finite density.
    """
    cfg = config or HmcConfig()
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    x = np.asarray(x0, dtype=float).copy()
    d = len(x)
    mass = np.ones(d) if cfg.mass is None else np.asarray(cfg.mass, dtype=float)
    if mass.shape != (d,) or np.any(mass <= 0):
        raise ValueError("mass must be a positive diagonal matching the state")
    mass_inv = 1.0 / mass

    logp, grad = target(x)
    if not np.isfinite(logp):
        raise ValueError("starting point has non-finite density")

    n_burn = int(cfg.burn_in * cfg.n_samples)
    kept = np.empty((cfg.n_samples - n_burn, d))
    kept_logp = np.empty(cfg.n_samples - n_burn)
    accepted = 0
    divergent = 0

    for n in range(cfg.n_samples):
        p0 = rng.normal(size=d) * np.sqrt(mass)
        h0 = -logp + 0.5 * float(np.sum(mass_inv * p0 * p0))
        x_new, p_new, logp_new, grad_new = leapfrog(
            target, x, p0, cfg.step_size, cfg.n_leapfrog, mass_inv, grad)
        h_new = -logp_new + 0.5 * float(np.sum(mass_inv * p_new * p_new))
        if not np.isfinite(h_new):
            divergent += 1
        elif np.log(rng.uniform()) < h0 - h_new:
            x, logp, grad = x_new, logp_new, grad_new
            accepted += 1
        if n >= n_burn:
            kept[n - n_burn] = x
            kept_logp[n - n_burn] = logp

    ess = np.array([effective_sample_size(kept[:, j]) for j in range(d)])
    return HmcResult(kept, kept_logp, accepted / cfg.n_samples, divergent, ess)


def effective_sample_size(chain) -> float:
    """Autocorrelation-based effective sample size of a scalar chain.

    Sums sample autocorrelations up to the first negative lag.
    """
    x = np.asarray(chain, dtype=float)
    n = len(x)
    if n < 4:
        return float(n)
    x = x - x.mean()
    denom = float(x @ x)
    if denom == 0:
        return float(n)
    m = next_fast_len(2 * n)
    f = rfft(x, m)
    acov = irfft(f * np.conj(f), m)[:n]
    rho = acov / acov[0]
    total = 0.0
    for k in range(1, n):
        if rho[k] < 0:
            break
        total += rho[k]
    return float(min(n, n / (1.0 + 2.0 * total)))


class LoadingTarget:
    """Log posterior over loadings (optionally plus log noise variances).

    Gram blocks for every kernel term are computed once; each evaluation
    only rebuilds the mixing matrices, reassembles the covariance, and
    refactorizes. The structure's kernel parameters and nuggets are held
    at their current values throughout.
    """

    def __init__(self, structure: MogpStructure, data: HeterotopicDataset,
                 priors: PriorSpec | None = None, sample_noise: bool = False):
        self.priors = priors or PriorSpec()
        self.sample_noise = sample_noise
        self._trial = structure.clone()
        self._tagged = data.tagged_inputs()
        self._y = data.stacked_y()
        self._grams = term_grams(structure, self._tagged)
        loading_names = [n for n in structure.free_param_names()
                         if ".loading" in n]
        noise_names = structure.noise_param_names() if sample_noise else []
        if not loading_names and not noise_names:
            raise ValueError("structure exposes nothing to sample")
        self.names = loading_names + list(noise_names)
        self._n_load = len(loading_names)
        x0 = structure.get_values(self.names)
        x0[self._n_load:] = np.log(x0[self._n_load:])
        self.x0 = x0

    def natural(self, x) -> np.ndarray:
        """Map a sampling-space point to natural parameter values."""
        nat = np.asarray(x, dtype=float).copy()
        nat[self._n_load:] = np.exp(nat[self._n_load:])
        return nat

    def apply(self, x, structure: MogpStructure) -> None:
        structure.set_values(self.names, self.natural(x))

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        nat = self.natural(x)
        zeros = np.zeros_like(x)
        try:
            self._trial.set_values(self.names, nat)
        except ValueError:
            return -np.inf, zeros
        sigma = assemble_covariance(self._trial, self._tagged, self._grams)
        sigma[np.diag_indices_from(sigma)] += noise_diagonal(self._trial, self._tagged)
        try:
            chol, _ = jittered_cholesky(sigma)
        except FactorizationError:
            return -np.inf, zeros
        alpha = cho_solve((chol, True), self._y)
        logp = _lml_terms(self._y, chol, alpha)
        inv = cho_solve((chol, True), np.eye(len(self._y)))
        w = np.outer(alpha, alpha) - inv
        grad = np.empty_like(x)
        for i, name in enumerate(self.names):
            dk = covariance_grad(self._trial, self._tagged, name, self._grams)
            grad[i] = 0.5 * float(np.sum(w * dk))
        # chain rule through the log transform of the noise variances
        grad[self._n_load:] *= nat[self._n_load:]

        pv, pg = self.priors.loading_logp(nat[: self._n_load])
        logp += pv
        grad[: self._n_load] += pg
        if self.sample_noise:
            pv, pg = self.priors.log_noise_logp(x[self._n_load:])
            logp += pv
            grad[self._n_load:] += pg
        return float(logp), grad


def make_loading_target(structure, data, priors=None, sample_noise=False):
    return LoadingTarget(structure, data, priors=priors, sample_noise=sample_noise)


@dataclass
class CounterfactualSamples:
    """Posterior draws of the untreated outcome path.

    Rows pool predictive paths over posterior parameter draws; columns
    follow the requested prediction inputs.
    """

    samples: np.ndarray
    times: np.ndarray
    n_draws: int
    n_pred: int

    @property
    def mean(self) -> np.ndarray:
        return self.samples.mean(axis=0)


def counterfactual_posterior(structure: MogpStructure, data: HeterotopicDataset,
                             test: TaggedInputs, draws: np.ndarray,
                             target: LoadingTarget, n_pred: int = 30,
                             rng=None, include_noise: bool = True,
                             ) -> CounterfactualSamples:
    """Predictive paths at held-out inputs, marginalized over draws.

    For each posterior draw the structure is reassembled, conditioned on
    the panel, and ``n_pred`` joint paths are sampled from the resulting
    predictive. With ``include_noise`` the paths describe observable
    outcomes rather than the latent function.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    draws = np.atleast_2d(np.asarray(draws, dtype=float))
    if draws.size == 0:
        raise ValueError("no posterior draws supplied")
    if n_pred < 1:
        raise ValueError("n_pred must be at least 1")
    paths = []
    for row in draws:
        trial = structure.clone()
        target.apply(row, trial)
        fitted = FittedGp(trial, data)
        dist = fitted.predictive(test, include_noise=include_noise)
        paths.append(sample_predictive(dist, n_pred, rng))
    samples = np.vstack(paths)
    return CounterfactualSamples(samples, np.asarray(test.X[:, 0], dtype=float),
                                 len(draws), n_pred)
