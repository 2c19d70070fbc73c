"""Adaptive tempered SMC sampler over dipole configurations.

The sampler targets the sequence ``pi_n(r|y) ∝ pi(r) p(y|r)^alpha_n`` with
``0 = alpha_1 < ... < alpha_N = 1``.  Each iteration reweights by
``p(y|r)^(alpha' - alpha)`` using the cached log marginal likelihoods (the
weights do not depend on the moves that follow, so the next exponent can be
chosen before the particles are mutated), resamples systematically when the
effective sample size drops below a threshold, and then applies the
configuration kernels to every particle.

All weight arithmetic is done in the log domain with max-shifted
log-sum-exp normalization; the effective sample size is likewise computed
from the normalized log-weights.

Randomness is drawn from counter-based Philox streams keyed by
``(master_seed, phase, iteration, particle slot)``, so results are bit-for-bit
reproducible and independent of how particles are distributed over workers.
"""

from __future__ import annotations

import math
import multiprocessing
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .kernels import KernelSettings, birth_death_step, location_sweep
from .model import (
    DipoleConfig,
    MarginalLikelihoodEvaluator,
    SemiLinearModel,
    TimeSeriesData,
    log_prior,
    truncated_poisson_log_pmf,
)
from .forward import SourceGrid

PHASE_INIT = 0
PHASE_KERNEL = 1
PHASE_RESAMPLE = 2
PHASE_AUDIT = 3


def particle_stream(master_seed: int, phase: int, iteration: int, index: int) -> np.random.Generator:
    """Independent counter-based RNG stream for one (phase, iteration, slot)."""
    seq = np.random.SeedSequence(entropy=[int(master_seed), int(phase), int(iteration), int(index)])
    return np.random.Generator(np.random.Philox(seq))


def log_normalize(log_weights: np.ndarray) -> tuple[np.ndarray, float]:
    """Normalize log-weights by max-shifted log-sum-exp.

    Returns the normalized log-weights and the log normalizing constant.
    """
    log_weights = np.asarray(log_weights, dtype=float)
    shift = float(np.max(log_weights))
    log_norm = shift + math.log(float(np.sum(np.exp(log_weights - shift))))
    return log_weights - log_norm, log_norm


def ess_from_log_weights(normalized_log_weights: np.ndarray) -> float:
    """Effective sample size 1 / sum(W_i^2) from normalized log-weights."""
    shift = float(np.max(normalized_log_weights))
    return float(np.exp(-(2.0 * shift + math.log(float(np.sum(np.exp(2.0 * (normalized_log_weights - shift))))))))


@dataclass
class SmcSettings:
    particle_count: int = 1000
    ess_ratio_band: tuple[float, float] = (0.90, 0.99)
    resample_threshold_fraction: float = 0.5
    max_bisection_steps: int = 50
    kernel_sweeps_per_iteration: int = 1
    master_seed: int = 0
    max_iterations: int = 10_000
    audit_fraction: float = 0.01

    def __post_init__(self) -> None:
        low, high = self.ess_ratio_band
        if not (0.0 < low < high < 1.0):
            raise ValueError("ess_ratio_band must satisfy 0 < low < high < 1")
        if self.particle_count < 2:
            raise ValueError("need at least two particles")
        if self.master_seed < 0:
            raise ValueError("master_seed must be nonnegative")


@dataclass(frozen=True)
class Particle:
    config: DipoleConfig
    log_weight_normalized: float
    cached_log_marglik: float


@dataclass(eq=False)
class ParticleSystem:
    """Weighted ensemble of configurations with cached log marginal likelihoods."""

    configs: list[DipoleConfig]
    log_weights: np.ndarray  # normalized
    log_margliks: np.ndarray
    alpha: float
    iteration: int
    ess: float

    @property
    def size(self) -> int:
        return len(self.configs)

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    @property
    def particles(self) -> list[Particle]:
        return [
            Particle(c, float(w), float(l))
            for c, w, l in zip(self.configs, self.log_weights, self.log_margliks)
        ]

    def validate(self) -> None:
        total = float(np.sum(np.exp(self.log_weights)))
        if abs(total - 1.0) > 1e-8:
            raise AssertionError(f"weights sum to {total}, not 1")
        if not (1.0 - 1e-9 <= self.ess <= self.size + 1e-9):
            raise AssertionError(f"ess {self.ess} outside [1, {self.size}]")
        if not 0.0 <= self.alpha <= 1.0:
            raise AssertionError(f"alpha {self.alpha} outside [0, 1]")


@dataclass
class IterationRecord:
    iteration: int
    alpha: float
    ess: float
    resampled: bool
    bd_accept_rate: float
    move_accept_rate: float
    ess_ratio: float
    bisection_in_band: bool
    millis: float


@dataclass
class RunTrace:
    records: list[IterationRecord] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    total_seconds: float = 0.0

    @property
    def n_iterations(self) -> int:
        return len(self.records)

    @property
    def alphas(self) -> np.ndarray:
        return np.array([r.alpha for r in self.records])

    def sampled_state_fields(self) -> list[tuple]:
        """Per-iteration fields that must be independent of timing and workers."""
        return [
            (r.iteration, r.alpha, r.ess, r.resampled, r.bd_accept_rate, r.move_accept_rate)
            for r in self.records
        ]

    def to_csv(self, path, config_hash: Optional[str] = None) -> None:
        lines = []
        if config_hash is not None:
            lines.append(f"# config_hash={config_hash}")
        for key in sorted(self.meta):
            lines.append(f"# {key}={self.meta[key]}")
        lines.append(
            "iteration,alpha,ess,resampled,bd_accept_rate,move_accept_rate,ess_ratio,bisection_in_band,millis"
        )
        for r in self.records:
            lines.append(
                f"{r.iteration},{r.alpha!r},{r.ess!r},{int(r.resampled)},"
                f"{r.bd_accept_rate!r},{r.move_accept_rate!r},{r.ess_ratio!r},"
                f"{int(r.bisection_in_band)},{r.millis!r}"
            )
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def sample_prior_config(model: SemiLinearModel, rng: np.random.Generator) -> DipoleConfig:
    """Draw a configuration from the prior: truncated Poisson count, uniform
    distinct locations."""
    pmf = np.exp(
        [truncated_poisson_log_pmf(k, model.poisson_lambda, model.d_max) for k in range(model.d_max + 1)]
    )
    pmf /= pmf.sum()
    d = int(rng.choice(model.d_max + 1, p=pmf))
    sites = rng.choice(model.n_grid_points, size=d, replace=False)
    return DipoleConfig(tuple(int(s) for s in sites))


def initialize(
    model: SemiLinearModel,
    y: TimeSeriesData,
    settings: SmcSettings,
    evaluator: Optional[MarginalLikelihoodEvaluator] = None,
) -> ParticleSystem:
    """I i.i.d. prior draws with uniform weights, log marginal caches filled."""
    if evaluator is None:
        evaluator = MarginalLikelihoodEvaluator(model, y)
    n = settings.particle_count
    configs = []
    for i in range(n):
        rng = particle_stream(settings.master_seed, PHASE_INIT, 0, i)
        configs.append(sample_prior_config(model, rng))
    log_margliks = np.array([evaluator(c) for c in configs])
    log_weights = np.full(n, -math.log(n))
    return ParticleSystem(
        configs=configs,
        log_weights=log_weights,
        log_margliks=log_margliks,
        alpha=0.0,
        iteration=0,
        ess=float(n),
    )


def candidate_ess(
    log_weights: np.ndarray, log_margliks: np.ndarray, delta_alpha: float
) -> float:
    """ESS of the weights after a tempering increment, without committing it."""
    logw, _ = log_normalize(log_weights + delta_alpha * log_margliks)
    return ess_from_log_weights(logw)


def propose_next_alpha(system: ParticleSystem, settings: SmcSettings) -> tuple[float, bool]:
    """Next tempering exponent by bisection on the increment.

    Searches (0, 1 - alpha] for an increment whose ESS ratio (candidate ESS
    over current ESS) falls inside the configured band, starting from the full
    remaining increment and halving.  If jumping straight to alpha = 1 keeps
    the ratio above the lower edge, 1 is returned immediately.  If the band is
    never hit within the step budget, the increment with the ratio closest to
    the band is returned with ``in_band = False`` so the caller can record a
    warning.
    """
    if system.alpha >= 1.0:
        raise ValueError("tempering already complete")
    low, high = settings.ess_ratio_band
    remaining = 1.0 - system.alpha

    def ratio(delta: float) -> float:
        return candidate_ess(system.log_weights, system.log_margliks, delta) / system.ess

    r_full = ratio(remaining)
    if r_full >= low:
        return 1.0, True

    def band_distance(r: float) -> float:
        return max(low - r, r - high, 0.0)

    lo, hi = 0.0, remaining
    best_delta, best_dist = remaining, band_distance(r_full)
    for _ in range(settings.max_bisection_steps):
        mid = 0.5 * (lo + hi)
        r = ratio(mid)
        dist = band_distance(r)
        if dist < best_dist:
            best_delta, best_dist = mid, dist
        if dist == 0.0:
            return system.alpha + mid, True
        if r < low:
            hi = mid
        else:  # r > high
            lo = mid
    new_alpha = min(1.0, system.alpha + best_delta)
    # keep alphas strictly increasing even in degenerate cases
    new_alpha = max(new_alpha, float(np.nextafter(system.alpha, 1.0)))
    return new_alpha, False


def reweight(system: ParticleSystem, new_alpha: float) -> ParticleSystem:
    """Tempering-increment weight update with log-domain normalization."""
    if new_alpha < system.alpha:
        raise ValueError("tempering exponent cannot decrease")
    delta = new_alpha - system.alpha
    logw, _ = log_normalize(system.log_weights + delta * system.log_margliks)
    return replace(
        system,
        log_weights=logw,
        alpha=float(new_alpha),
        ess=ess_from_log_weights(logw),
    )


def systematic_resample_indices(weights: np.ndarray, u: float) -> np.ndarray:
    """Strided selection over the cumulative weights from one uniform draw.

    ``u`` must lie in [0, 1/I); offspring counts satisfy
    ``|count_i - I * W_i| < 1`` deterministically.
    """
    n = len(weights)
    if not 0.0 <= u < 1.0 / n:
        raise ValueError("u must lie in [0, 1/I)")
    positions = u + np.arange(n) / n
    cumulative = np.cumsum(weights)
    cumulative[-1] = 1.0  # guard against rounding of the final edge
    return np.searchsorted(cumulative, positions, side="right")


def maybe_resample(
    system: ParticleSystem, settings: SmcSettings, rng: np.random.Generator
) -> tuple[ParticleSystem, bool]:
    """Systematic resampling when ESS falls below the threshold fraction of I."""
    n = system.size
    if system.ess >= settings.resample_threshold_fraction * n:
        return system, False
    u = rng.random() / n
    idx = systematic_resample_indices(np.exp(system.log_weights), u)
    new_system = replace(
        system,
        configs=[system.configs[j] for j in idx],
        log_margliks=system.log_margliks[idx].copy(),
        log_weights=np.full(n, -math.log(n)),
        ess=float(n),
    )
    return new_system, True


def _tempered_logpost_fn(model: SemiLinearModel, evaluator: MarginalLikelihoodEvaluator, alpha: float):
    n_grid = model.n_grid_points

    def logpost(config: DipoleConfig) -> float:
        return log_prior(model, config, n_grid) + alpha * evaluator(config)

    return logpost


def _apply_kernels_to_particle(
    config: DipoleConfig,
    alpha: float,
    model: SemiLinearModel,
    evaluator: MarginalLikelihoodEvaluator,
    grid: SourceGrid,
    kernel_settings: KernelSettings,
    sweeps: int,
    rng: np.random.Generator,
) -> tuple[DipoleConfig, float, tuple[int, int, int, int]]:
    logpost = _tempered_logpost_fn(model, evaluator, alpha)
    bd_proposed = bd_accepted = mv_attempted = mv_accepted = 0
    for _ in range(sweeps):
        config, ok, move_type = birth_death_step(
            config, logpost, grid, kernel_settings, rng, model.d_max
        )
        if move_type != "none":
            bd_proposed += 1
            bd_accepted += int(ok)
        config, acc = location_sweep(config, logpost, grid, kernel_settings, rng)
        mv_attempted += config.d
        mv_accepted += acc
    return config, evaluator(config), (bd_proposed, bd_accepted, mv_attempted, mv_accepted)


_WORKER_CTX: Optional[tuple] = None


def _init_worker(model, y, grid, kernel_settings, sweeps, master_seed) -> None:
    global _WORKER_CTX
    evaluator = MarginalLikelihoodEvaluator(model, y)
    _WORKER_CTX = (model, evaluator, grid, kernel_settings, sweeps, master_seed)


def _kernel_task(task: tuple[int, int, tuple[int, ...], float]):
    iteration, slot, indices, alpha = task
    model, evaluator, grid, kernel_settings, sweeps, master_seed = _WORKER_CTX
    rng = particle_stream(master_seed, PHASE_KERNEL, iteration, slot)
    config, lml, stats = _apply_kernels_to_particle(
        DipoleConfig(indices), alpha, model, evaluator, grid, kernel_settings, sweeps, rng
    )
    return config.indices, lml, stats


def _mutate_all(
    system: ParticleSystem,
    iteration: int,
    model: SemiLinearModel,
    evaluator: MarginalLikelihoodEvaluator,
    grid: SourceGrid,
    kernel_settings: KernelSettings,
    settings: SmcSettings,
    pool,
    pool_size: int = 0,
) -> tuple[ParticleSystem, float, float]:
    sweeps = settings.kernel_sweeps_per_iteration
    if pool is not None:
        tasks = [
            (iteration, i, system.configs[i].indices, system.alpha) for i in range(system.size)
        ]
        chunk = max(1, system.size // (max(1, pool_size) * 4))
        results = pool.map(_kernel_task, tasks, chunksize=chunk)
        configs = [DipoleConfig(ix) for ix, _, _ in results]
        margliks = np.array([lml for _, lml, _ in results])
        stats = np.array([s for _, _, s in results])
    else:
        configs = []
        margliks = np.empty(system.size)
        stats = np.zeros((system.size, 4), dtype=int)
        for i in range(system.size):
            rng = particle_stream(settings.master_seed, PHASE_KERNEL, iteration, i)
            cfg, lml, st = _apply_kernels_to_particle(
                system.configs[i], system.alpha, model, evaluator, grid, kernel_settings, sweeps, rng
            )
            configs.append(cfg)
            margliks[i] = lml
            stats[i] = st
    totals = stats.sum(axis=0)
    bd_rate = totals[1] / max(1, totals[0])
    mv_rate = totals[3] / max(1, totals[2])
    new_system = replace(system, configs=configs, log_margliks=margliks, iteration=iteration)
    return new_system, float(bd_rate), float(mv_rate)


def _audit_caches(
    system: ParticleSystem,
    iteration: int,
    evaluator: MarginalLikelihoodEvaluator,
    settings: SmcSettings,
) -> None:
    if settings.audit_fraction <= 0:
        return
    n_audit = max(1, int(round(settings.audit_fraction * system.size)))
    rng = particle_stream(settings.master_seed, PHASE_AUDIT, iteration, 0)
    picks = rng.choice(system.size, size=min(n_audit, system.size), replace=False)
    for i in picks:
        recomputed = evaluator.fresh(system.configs[i])
        if abs(recomputed - system.log_margliks[i]) > 1e-9:
            raise RuntimeError(
                f"cache audit failed at iteration {iteration}, particle {i}: "
                f"cached {system.log_margliks[i]!r} vs recomputed {recomputed!r}"
            )


def run(
    model: SemiLinearModel,
    y: TimeSeriesData,
    grid: SourceGrid,
    kernel_settings: KernelSettings,
    settings: SmcSettings,
    workers: int = 1,
) -> tuple[ParticleSystem, RunTrace]:
    """Full adaptive tempering run: returns the final particle system at
    alpha = 1 (after a last kernel sweep under the posterior) and the trace."""
    if y.n_sensors != model.sensor_count:
        raise ValueError("data and model disagree on the number of sensors")
    start = time.perf_counter()
    evaluator = MarginalLikelihoodEvaluator(model, y)
    system = initialize(model, y, settings, evaluator=evaluator)
    trace = RunTrace(
        meta={
            "particle_count": settings.particle_count,
            "master_seed": settings.master_seed,
            "ess_ratio_band": settings.ess_ratio_band,
            "workers": workers,
        }
    )
    pool = None
    try:
        if workers > 1:
            ctx = multiprocessing.get_context("fork")
            pool = ctx.Pool(
                processes=workers,
                initializer=_init_worker,
                initargs=(model, y, grid, kernel_settings, settings.kernel_sweeps_per_iteration, settings.master_seed),
            )
        while system.alpha < 1.0:
            iter_start = time.perf_counter()
            iteration = system.iteration + 1
            if iteration > settings.max_iterations:
                raise RuntimeError(
                    f"tempering did not reach alpha = 1 within {settings.max_iterations} iterations "
                    f"(alpha = {system.alpha}, ess = {system.ess})"
                )
            previous_ess = system.ess
            new_alpha, in_band = propose_next_alpha(system, settings)
            if not in_band:
                trace.warnings.append(
                    f"iteration {iteration}: bisection exhausted, closest ESS ratio used"
                )
            system = reweight(system, new_alpha)
            ess_after = system.ess
            system, resampled = maybe_resample(
                system, settings, particle_stream(settings.master_seed, PHASE_RESAMPLE, iteration, 0)
            )
            system, bd_rate, mv_rate = _mutate_all(
                system, iteration, model, evaluator, grid, kernel_settings, settings, pool, workers
            )
            _audit_caches(system, iteration, evaluator, settings)
            trace.records.append(
                IterationRecord(
                    iteration=iteration,
                    alpha=system.alpha,
                    ess=ess_after,
                    resampled=resampled,
                    bd_accept_rate=bd_rate,
                    move_accept_rate=mv_rate,
                    ess_ratio=ess_after / previous_ess,
                    bisection_in_band=in_band,
                    millis=(time.perf_counter() - iter_start) * 1e3,
                )
            )
    finally:
        if pool is not None:
            pool.close()
            pool.join()
    trace.total_seconds = time.perf_counter() - start
    return system, trace
