"""Semi-linear Gaussian model and its analytic formulas.

The observation model is ``y_t = G(r) q_t + e_t`` for each time point, where
``r`` is the discrete dipole configuration (count and grid locations), ``q_t``
the stacked 3-vectors of dipole moments, ``G(r)`` the lead field, and the
priors are zero-mean Gaussians: ``q_t ~ N(0, sigma_q^2 I)`` independently per
time point and ``e_t ~ N(0, sigma_e^2 I)``.

With the moments integrated out, each time point contributes a zero-mean
Gaussian marginal likelihood with covariance

    Gamma(r) = sigma_q^2 G(r) G(r)^T + sigma_e^2 I ,

shared across time points, so for a whole time series

    log p(y|r) = -(N_t/2) logdet Gamma(r)
                 - (1/2) sum_t y_t^T Gamma(r)^{-1} y_t
                 - (N_s N_t / 2) log(2 pi)

and only one symmetric factorization of Gamma(r) is needed per configuration
regardless of the window length.  The conditional posterior of the moments
given ``r`` factorizes over time points with means
``sigma_q^2 G^T Gamma^{-1} y_t`` and a shared covariance
``sigma_q^2 I - sigma_q^4 G^T Gamma^{-1} G``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular

from .forward import LeadFieldProvider, assemble_lead_field

LOG_2PI = math.log(2.0 * math.pi)


class ConditioningError(RuntimeError):
    """Symmetric factorization of a model covariance failed or degenerated."""


@dataclass(frozen=True, order=True)
class DipoleConfig:
    """Dipole count and distinct grid locations, kept sorted ascending.

    The sorted tuple is the canonical form: configurations compare and hash
    by value, which makes them usable as cache keys.
    """

    indices: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        idx = tuple(int(i) for i in self.indices)
        if any(i < 0 for i in idx):
            raise ValueError("grid indices must be nonnegative")
        if len(set(idx)) != len(idx):
            raise ValueError("grid indices must be distinct")
        object.__setattr__(self, "indices", tuple(sorted(idx)))

    @property
    def d(self) -> int:
        return len(self.indices)

    def with_added(self, index: int) -> "DipoleConfig":
        return DipoleConfig(self.indices + (int(index),))

    def with_removed(self, index: int) -> "DipoleConfig":
        if index not in self.indices:
            raise ValueError(f"index {index} not in configuration")
        return DipoleConfig(tuple(i for i in self.indices if i != index))

    def with_replaced(self, old: int, new: int) -> "DipoleConfig":
        if old not in self.indices:
            raise ValueError(f"index {old} not in configuration")
        return DipoleConfig(tuple(new if i == old else i for i in self.indices))


@dataclass(eq=False)
class TimeSeriesData:
    """Sensor measurements, one column per time point."""

    values: np.ndarray  # (n_sensors, n_times)

    def __post_init__(self) -> None:
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if not np.all(np.isfinite(self.values)):
            raise ValueError("measurements must be finite")

    @property
    def n_sensors(self) -> int:
        return self.values.shape[0]

    @property
    def n_times(self) -> int:
        return self.values.shape[1]

    def column(self, t: int) -> np.ndarray:
        return self.values[:, t]


@dataclass(eq=False)
class SemiLinearModel:
    """Model parameters plus access to the forward operator."""

    sensor_count: int
    time_count: int
    sigma_q: float
    sigma_e: float
    poisson_lambda: float
    d_max: int
    forward: LeadFieldProvider

    def __post_init__(self) -> None:
        if self.sigma_q <= 0 or self.sigma_e <= 0:
            raise ValueError("sigma_q and sigma_e must be positive")
        if self.poisson_lambda <= 0:
            raise ValueError("poisson_lambda must be positive")
        if not (1 <= self.d_max <= self.forward.n_points):
            raise ValueError("d_max must be in [1, number of grid points]")
        if self.sensor_count != self.forward.n_sensors:
            raise ValueError("sensor_count does not match the lead field provider")

    @property
    def n_grid_points(self) -> int:
        return self.forward.n_points

    def lead_field(self, config: DipoleConfig) -> np.ndarray:
        return assemble_lead_field(self.forward, config.indices)


@dataclass(eq=False)
class MomentPosterior:
    """Gaussian conditional posterior of the moments: per-time-point means and
    one shared covariance (stationary prior and noise make it time-independent)."""

    means: np.ndarray  # (n_times, 3d)
    covariance: np.ndarray  # (3d, 3d)

    def __post_init__(self) -> None:
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.covariance = np.asarray(self.covariance, dtype=float)
        scale = float(np.max(np.abs(self.covariance))) if self.covariance.size else 0.0
        asym = float(np.max(np.abs(self.covariance - self.covariance.T))) if self.covariance.size else 0.0
        if scale > 0 and asym > 1e-10 * scale:
            raise ValueError("covariance is not symmetric")
        if self.covariance.size:
            eigs = np.linalg.eigvalsh(self.covariance)
            if eigs[0] < -1e-10 * max(eigs[-1], 0.0):
                raise ValueError("covariance has a significantly negative eigenvalue")

    @property
    def n_times(self) -> int:
        return self.means.shape[0]

    @property
    def n_moment_dims(self) -> int:
        return self.means.shape[1]

    def strength(self, dipole: int) -> np.ndarray:
        """Norm of the posterior-mean moment of one dipole over time."""
        block = self.means[:, 3 * dipole : 3 * dipole + 3]
        return np.linalg.norm(block, axis=1)


def _gamma_cholesky(model: SemiLinearModel, config: DipoleConfig) -> np.ndarray:
    """Lower Cholesky factor of Gamma(r) = sigma_q^2 G G^T + sigma_e^2 I."""
    g = model.lead_field(config)
    gamma = (model.sigma_q**2) * (g @ g.T)
    gamma[np.diag_indices_from(gamma)] += model.sigma_e**2
    try:
        lower = cholesky(gamma, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - sigma_e > 0 prevents this
        raise ConditioningError(f"covariance factorization failed for {config}") from exc
    if np.any(np.diag(lower) < 1e-12 * model.sigma_e**2):
        raise ConditioningError(f"covariance factor degenerate for {config}")
    return lower


def _gaussian_logpdf_from_factor(lower: np.ndarray, residuals: np.ndarray) -> float:
    """Sum over columns of log N(residual; 0, L L^T)."""
    n_dim = lower.shape[0]
    n_cols = residuals.shape[1] if residuals.ndim == 2 else 1
    white = solve_triangular(lower, residuals, lower=True, check_finite=False)
    logdet = 2.0 * float(np.sum(np.log(np.diag(lower))))
    quad = float(np.sum(white * white))
    return -0.5 * (n_cols * (n_dim * LOG_2PI + logdet) + quad)


def log_marginal_likelihood_single(
    model: SemiLinearModel,
    config: DipoleConfig,
    y_t: np.ndarray,
    moment_mean: Optional[np.ndarray] = None,
    noise_mean: Optional[np.ndarray] = None,
) -> float:
    """log N(y_t; G q0 + e0, Gamma(r)) for one time point.

    The default zero means give the model actually used everywhere; the
    general-mean form is kept for completeness of the Gaussian identities.
    """
    y_t = np.asarray(y_t, dtype=float).reshape(-1)
    if y_t.shape[0] != model.sensor_count:
        raise ValueError("y_t has the wrong number of sensors")
    mean = np.zeros(model.sensor_count)
    if moment_mean is not None:
        mean = mean + model.lead_field(config) @ np.asarray(moment_mean, dtype=float)
    if noise_mean is not None:
        mean = mean + np.asarray(noise_mean, dtype=float)
    lower = _gamma_cholesky(model, config)
    return _gaussian_logpdf_from_factor(lower, (y_t - mean)[:, None])


def log_marginal_likelihood(model: SemiLinearModel, config: DipoleConfig, y: TimeSeriesData) -> float:
    """log p(y|r) over the whole window; one factorization per call."""
    if y.n_sensors != model.sensor_count:
        raise ValueError("data has the wrong number of sensors")
    lower = _gamma_cholesky(model, config)
    return _gaussian_logpdf_from_factor(lower, y.values)


def conditional_moment_posterior(
    model: SemiLinearModel,
    config: DipoleConfig,
    y: TimeSeriesData,
    moment_mean: Optional[np.ndarray] = None,
    noise_mean: Optional[np.ndarray] = None,
) -> MomentPosterior:
    """Gaussian posterior of the moments given the configuration."""
    if config.d == 0:
        raise ValueError("conditional posterior requires at least one dipole")
    if y.n_sensors != model.sensor_count:
        raise ValueError("data has the wrong number of sensors")
    g = model.lead_field(config)
    sq2 = model.sigma_q**2
    lower = _gamma_cholesky(model, config)
    residual = y.values
    prior_mean = np.zeros(3 * config.d)
    if moment_mean is not None:
        prior_mean = np.asarray(moment_mean, dtype=float).reshape(3 * config.d)
        residual = residual - (g @ prior_mean)[:, None]
    if noise_mean is not None:
        residual = residual - np.asarray(noise_mean, dtype=float).reshape(-1, 1)
    solved = cho_solve((lower, True), residual, check_finite=False)  # Gamma^{-1} (y - ...)
    means = prior_mean[None, :] + sq2 * (g.T @ solved).T  # (n_times, 3d)
    gig = g.T @ cho_solve((lower, True), g, check_finite=False)
    cov = sq2 * np.eye(3 * config.d) - (sq2 * sq2) * gig
    cov = 0.5 * (cov + cov.T)
    return MomentPosterior(means=means, covariance=cov)


def truncated_poisson_log_pmf(d: int, lam: float, d_max: int) -> float:
    """log pmf of a Poisson(lam) truncated and renormalized to [0, d_max]."""
    if not 0 <= d <= d_max:
        raise ValueError("count outside the truncated support")
    log_terms = np.array([k * math.log(lam) - math.lgamma(k + 1) for k in range(d_max + 1)])
    log_z = float(np.logaddexp.reduce(log_terms))
    return d * math.log(lam) - math.lgamma(d + 1) - log_z


def truncated_poisson_mean(lam: float, d_max: int) -> float:
    pmf = np.exp([truncated_poisson_log_pmf(k, lam, d_max) for k in range(d_max + 1)])
    return float(np.sum(np.arange(d_max + 1) * pmf))


def log_prior(model: SemiLinearModel, config: DipoleConfig, n_grid_points: int) -> float:
    """Prior over configurations: truncated Poisson count, uniform unordered
    distinct locations (1 / C(n_grid_points, d))."""
    d = config.d
    if d > model.d_max:
        raise ValueError("configuration exceeds d_max")
    if config.indices and config.indices[-1] >= n_grid_points:
        raise ValueError("configuration index outside the grid")
    count_term = truncated_poisson_log_pmf(d, model.poisson_lambda, model.d_max)
    location_term = -(math.lgamma(n_grid_points + 1) - math.lgamma(d + 1) - math.lgamma(n_grid_points - d + 1))
    return count_term + location_term


def marginal_of_tempered_log_density(
    model: SemiLinearModel,
    config: DipoleConfig,
    y: TimeSeriesData,
    alpha: float,
) -> float:
    """Unnormalized log-value of the marginal of the jointly tempered posterior.

    Tempering the full likelihood and then integrating the moments yields the
    prior times a zero-mean Gaussian whose noise covariance is inflated to
    ``sigma_e^2 / alpha``; the moment-prior term is untouched.  Undefined at
    ``alpha = 0`` (infinite noise), which raises a domain error.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError("the jointly tempered path requires alpha in (0, 1]")
    prior = log_prior(model, config, model.n_grid_points)
    g = model.lead_field(config)
    cov = (model.sigma_q**2) * (g @ g.T)
    cov[np.diag_indices_from(cov)] += model.sigma_e**2 / alpha
    lower = cholesky(cov, lower=True, check_finite=False)
    return prior + _gaussian_logpdf_from_factor(lower, y.values)


def tempered_marginal_log_density(
    model: SemiLinearModel,
    config: DipoleConfig,
    y: TimeSeriesData,
    alpha: float,
) -> float:
    """Unnormalized log-value of the semi-analytic tempering path.

    Written in the form that scales both covariances by ``1/alpha`` and keeps
    the ``(1 - alpha)/2 logdet Gamma(r)`` bookkeeping term explicit; up to an
    alpha-only constant this equals ``log prior + alpha * log p(y|r)``.  At
    ``alpha = 0`` the limit is the log-prior (the divergent alpha-only
    constant is dropped).
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    prior = log_prior(model, config, model.n_grid_points)
    if alpha == 0.0:
        return prior
    lower_gamma = _gamma_cholesky(model, config)
    logdet_gamma = 2.0 * float(np.sum(np.log(np.diag(lower_gamma))))
    scaled = lower_gamma / math.sqrt(alpha)  # factor of Gamma(r)/alpha
    return (
        prior
        + 0.5 * (1.0 - alpha) * y.n_times * logdet_gamma
        + _gaussian_logpdf_from_factor(scaled, y.values)
    )


def tempered_diagnostic(
    model: SemiLinearModel,
    config: DipoleConfig,
    y: TimeSeriesData,
    alpha: float,
) -> tuple[float, float]:
    """Pair of unnormalized log-values of the two tempering paths at alpha.

    The two interpolations share both endpoints in distribution but differ in
    between; comparing the values across configurations at a fixed alpha shows
    how far apart the paths are.  Normalizing constants are omitted, so only
    differences across configurations are meaningful; at ``alpha = 1`` the
    two values coincide exactly.  ``alpha = 0`` raises (the jointly tempered
    path is undefined there; use :func:`tempered_marginal_log_density` for
    the semi-analytic branch alone, which returns its log-prior limit).
    """
    return (
        marginal_of_tempered_log_density(model, config, y, alpha),
        tempered_marginal_log_density(model, config, y, alpha),
    )


class MarginalLikelihoodEvaluator:
    """Memoizing wrapper around :func:`log_marginal_likelihood` for one dataset.

    Configurations are hashable, so repeated evaluations (duplicated particles
    after resampling, revisited proposals) become dictionary hits.
    """

    def __init__(self, model: SemiLinearModel, y: TimeSeriesData):
        self.model = model
        self.y = y
        self._cache: dict[tuple[int, ...], float] = {}

    def __call__(self, config: DipoleConfig) -> float:
        key = config.indices
        value = self._cache.get(key)
        if value is None:
            value = log_marginal_likelihood(self.model, config, self.y)
            self._cache[key] = value
        return value

    def fresh(self, config: DipoleConfig) -> float:
        """Recompute from scratch, bypassing the cache (used by audits)."""
        return log_marginal_likelihood(self.model, config, self.y)

    @property
    def cache_size(self) -> int:
        return len(self._cache)
