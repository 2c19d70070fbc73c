"""Non-marginalized SMC baseline over (configuration, moments) for
single-time-point data.

This sampler shares the tempering, ESS, bisection and resampling machinery of
the marginalized sampler but carries the dipole moments explicitly; the
weights use the full likelihood ``N(y; G(r) q, sigma_e^2 I)`` raised to the
tempering increment.  It exists for variance comparisons against the
marginalized sampler on the same posterior.

Kernels:

* birth/death as in the marginalized sampler, with a new dipole's moment drawn
  from its prior ``N(0, sigma_q^2 I_3)``; with that proposal the moment prior
  cancels against the proposal density and the acceptance ratio reduces to the
  discrete birth/death form times the tempered likelihood ratio,
* location moves identical in structure to the marginalized ones, the moment
  carried along,
* a per-dipole Gaussian random walk on the moments (symmetric proposal),
  Metropolis-corrected against the tempered target.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .forward import SourceGrid, assemble_lead_field
from .kernels import KernelSettings, birth_log_hastings, death_log_hastings, move_candidates
from .model import DipoleConfig, SemiLinearModel, TimeSeriesData, log_prior, LOG_2PI
from .smc import (
    IterationRecord,
    PHASE_INIT,
    PHASE_KERNEL,
    PHASE_RESAMPLE,
    RunTrace,
    SmcSettings,
    ess_from_log_weights,
    log_normalize,
    particle_stream,
    sample_prior_config,
    systematic_resample_indices,
)

MOMENT_STEP_FRACTION = 0.1  # random-walk std as a fraction of sigma_q


@dataclass(eq=False)
class FullParticle:
    config: DipoleConfig
    moments: np.ndarray  # (d, 3), rows aligned with config.indices
    cached_log_lik: float


@dataclass(eq=False)
class FullParticleSystem:
    particles: list[FullParticle]
    log_weights: np.ndarray
    alpha: float
    iteration: int
    ess: float

    @property
    def size(self) -> int:
        return len(self.particles)

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    @property
    def configs(self) -> list[DipoleConfig]:
        return [p.config for p in self.particles]

    @property
    def log_liks(self) -> np.ndarray:
        return np.array([p.cached_log_lik for p in self.particles])


def full_log_likelihood(model: SemiLinearModel, config: DipoleConfig, moments: np.ndarray, y_t: np.ndarray) -> float:
    """log N(y_t; G(r) q, sigma_e^2 I) at a single time point."""
    g = assemble_lead_field(model.forward, config.indices)
    residual = y_t - g @ moments.reshape(-1)
    n = y_t.shape[0]
    return -0.5 * (n * (LOG_2PI + 2.0 * math.log(model.sigma_e)) + float(residual @ residual) / model.sigma_e**2)


def _moment_log_prior(moments: np.ndarray, sigma_q: float) -> float:
    n = moments.size
    return -0.5 * (n * (LOG_2PI + 2.0 * math.log(sigma_q)) + float(np.sum(moments * moments)) / sigma_q**2)


def _insert_row(indices: tuple[int, ...], moments: np.ndarray, site: int, row: np.ndarray) -> np.ndarray:
    pos = int(np.searchsorted(np.array(indices), site))
    return np.insert(moments, pos, row, axis=0)


def _full_birth_death(
    particle: FullParticle,
    alpha: float,
    model: SemiLinearModel,
    grid: SourceGrid,
    settings: KernelSettings,
    rng: np.random.Generator,
    y_t: np.ndarray,
) -> tuple[FullParticle, bool, str]:
    config, moments = particle.config, particle.moments
    d, n_grid = config.d, grid.n_points
    u = rng.random()
    if u < settings.p_birth:
        if d >= model.d_max or d >= n_grid:
            return particle, False, "none"
        occupied = set(config.indices)
        while True:
            site = int(rng.integers(n_grid))
            if site not in occupied:
                break
        new_row = rng.normal(0.0, model.sigma_q, size=3)
        new_config = config.with_added(site)
        new_moments = _insert_row(config.indices, moments, site, new_row)
        new_lik = full_log_likelihood(model, new_config, new_moments, y_t)
        log_ratio = (
            log_prior(model, new_config, n_grid)
            - log_prior(model, config, n_grid)
            + alpha * (new_lik - particle.cached_log_lik)
            + birth_log_hastings(d, n_grid, settings)
        )
        if math.log(rng.random()) < log_ratio:
            return FullParticle(new_config, new_moments, new_lik), True, "birth"
        return particle, False, "birth"
    if u < settings.p_birth + settings.p_death:
        if d == 0:
            return particle, False, "none"
        k = int(rng.integers(d))
        new_config = config.with_removed(config.indices[k])
        new_moments = np.delete(moments, k, axis=0)
        new_lik = full_log_likelihood(model, new_config, new_moments, y_t)
        log_ratio = (
            log_prior(model, new_config, n_grid)
            - log_prior(model, config, n_grid)
            + alpha * (new_lik - particle.cached_log_lik)
            + death_log_hastings(d, n_grid, settings)
        )
        if math.log(rng.random()) < log_ratio:
            return FullParticle(new_config, new_moments, new_lik), True, "death"
        return particle, False, "death"
    return particle, False, "none"


def _full_location_sweep(
    particle: FullParticle,
    alpha: float,
    model: SemiLinearModel,
    grid: SourceGrid,
    settings: KernelSettings,
    rng: np.random.Generator,
    y_t: np.ndarray,
) -> tuple[FullParticle, int]:
    accepted = 0
    for _ in range(particle.config.d):
        config, moments = particle.config, particle.moments
        k = int(rng.integers(config.d))
        current = config.indices[k]
        support, probs = move_candidates(config, k, grid, settings)
        if len(support) == 1:
            continue
        choice = int(support[rng.choice(len(support), p=probs)])
        if choice == current:
            accepted += 1
            continue
        new_config = config.with_replaced(current, choice)
        rest = np.delete(moments, k, axis=0)
        rest_idx = tuple(i for i in config.indices if i != current)
        new_moments = _insert_row(rest_idx, rest, choice, moments[k])
        new_lik = full_log_likelihood(model, new_config, new_moments, y_t)
        forward_prob = probs[np.searchsorted(support, choice)]
        rev_support, rev_probs = move_candidates(new_config, new_config.indices.index(choice), grid, settings)
        rev_prob = rev_probs[np.searchsorted(rev_support, current)]
        log_ratio = (
            alpha * (new_lik - particle.cached_log_lik)
            + math.log(rev_prob)
            - math.log(forward_prob)
        )
        if math.log(rng.random()) < log_ratio:
            particle = FullParticle(new_config, new_moments, new_lik)
            accepted += 1
    return particle, accepted


def _full_moment_sweep(
    particle: FullParticle,
    alpha: float,
    model: SemiLinearModel,
    rng: np.random.Generator,
    y_t: np.ndarray,
    step_fraction: float,
) -> tuple[FullParticle, int]:
    accepted = 0
    step = step_fraction * model.sigma_q
    for k in range(particle.config.d):
        moments = particle.moments
        proposal = moments.copy()
        proposal[k] = moments[k] + rng.normal(0.0, step, size=3)
        new_lik = full_log_likelihood(model, particle.config, proposal, y_t)
        log_ratio = (
            alpha * (new_lik - particle.cached_log_lik)
            + _moment_log_prior(proposal[k], model.sigma_q)
            - _moment_log_prior(moments[k], model.sigma_q)
        )
        if math.log(rng.random()) < log_ratio:
            particle = FullParticle(particle.config, proposal, new_lik)
            accepted += 1
    return particle, accepted


def initialize_full(
    model: SemiLinearModel, y_single: TimeSeriesData, settings: SmcSettings
) -> FullParticleSystem:
    n = settings.particle_count
    y_t = y_single.column(0)
    particles = []
    for i in range(n):
        rng = particle_stream(settings.master_seed, PHASE_INIT, 0, i)
        config = sample_prior_config(model, rng)
        moments = rng.normal(0.0, model.sigma_q, size=(config.d, 3))
        particles.append(
            FullParticle(config, moments, full_log_likelihood(model, config, moments, y_t))
        )
    return FullParticleSystem(
        particles=particles,
        log_weights=np.full(n, -math.log(n)),
        alpha=0.0,
        iteration=0,
        ess=float(n),
    )


def _propose_alpha_full(system: FullParticleSystem, settings: SmcSettings) -> tuple[float, bool]:
    # same bisection scheme as the marginalized sampler, driven by the full
    # likelihood caches
    from .smc import propose_next_alpha, ParticleSystem

    proxy = ParticleSystem(
        configs=system.configs,
        log_weights=system.log_weights,
        log_margliks=system.log_liks,
        alpha=system.alpha,
        iteration=system.iteration,
        ess=system.ess,
    )
    return propose_next_alpha(proxy, settings)


def run_full(
    model: SemiLinearModel,
    y_single: TimeSeriesData,
    grid: SourceGrid,
    kernel_settings: KernelSettings,
    settings: SmcSettings,
    moment_step_fraction: float = MOMENT_STEP_FRACTION,
) -> tuple[FullParticleSystem, RunTrace]:
    """Adaptive tempering over (configuration, moments); single time point only."""
    if y_single.n_times != 1:
        raise ValueError("the full sampler handles a single time point")
    if y_single.n_sensors != model.sensor_count:
        raise ValueError("data and model disagree on the number of sensors")
    start = time.perf_counter()
    y_t = y_single.column(0)
    system = initialize_full(model, y_single, settings)
    trace = RunTrace(
        meta={
            "sampler": "full",
            "particle_count": settings.particle_count,
            "master_seed": settings.master_seed,
            "moment_step_fraction": moment_step_fraction,
            "birth_moment_proposal": "prior-draw",
        }
    )
    while system.alpha < 1.0:
        iter_start = time.perf_counter()
        iteration = system.iteration + 1
        if iteration > settings.max_iterations:
            raise RuntimeError(
                f"tempering did not reach alpha = 1 within {settings.max_iterations} iterations"
            )
        previous_ess = system.ess
        new_alpha, in_band = _propose_alpha_full(system, settings)
        if not in_band:
            trace.warnings.append(f"iteration {iteration}: bisection exhausted")
        delta = new_alpha - system.alpha
        logw, _ = log_normalize(system.log_weights + delta * system.log_liks)
        system = replace(
            system, log_weights=logw, alpha=float(new_alpha), ess=ess_from_log_weights(logw)
        )
        ess_after = system.ess
        resampled = False
        if system.ess < settings.resample_threshold_fraction * system.size:
            rng = particle_stream(settings.master_seed, PHASE_RESAMPLE, iteration, 0)
            idx = systematic_resample_indices(np.exp(system.log_weights), rng.random() / system.size)
            system = replace(
                system,
                particles=[
                    FullParticle(
                        system.particles[j].config,
                        system.particles[j].moments.copy(),
                        system.particles[j].cached_log_lik,
                    )
                    for j in idx
                ],
                log_weights=np.full(system.size, -math.log(system.size)),
                ess=float(system.size),
            )
            resampled = True
        bd_prop = bd_acc = mv_att = mv_acc = 0
        new_particles = []
        for i, particle in enumerate(system.particles):
            rng = particle_stream(settings.master_seed, PHASE_KERNEL, iteration, i)
            for _ in range(settings.kernel_sweeps_per_iteration):
                particle, ok, move_type = _full_birth_death(
                    particle, system.alpha, model, grid, kernel_settings, rng, y_t
                )
                if move_type != "none":
                    bd_prop += 1
                    bd_acc += int(ok)
                particle, acc = _full_location_sweep(
                    particle, system.alpha, model, grid, kernel_settings, rng, y_t
                )
                mv_att += particle.config.d
                mv_acc += acc
                particle, _ = _full_moment_sweep(
                    particle, system.alpha, model, rng, y_t, moment_step_fraction
                )
            new_particles.append(particle)
        system = replace(system, particles=new_particles, iteration=iteration)
        trace.records.append(
            IterationRecord(
                iteration=iteration,
                alpha=system.alpha,
                ess=ess_after,
                resampled=resampled,
                bd_accept_rate=bd_acc / max(1, bd_prop),
                move_accept_rate=mv_acc / max(1, mv_att),
                ess_ratio=ess_after / previous_ess,
                bisection_in_band=in_band,
                millis=(time.perf_counter() - iter_start) * 1e3,
            )
        )
    trace.total_seconds = time.perf_counter() - start
    return system, trace


@dataclass(eq=False)
class IntensityStdReport:
    """Per-grid-point sampling variability of the intensity measure."""

    std_full: np.ndarray
    std_semi: np.ndarray
    threshold: float
    runs: int
    particle_count: int

    @property
    def above_threshold(self) -> np.ndarray:
        return np.flatnonzero((self.std_full > self.threshold) | (self.std_semi > self.threshold))

    @property
    def fraction_semi_not_worse(self) -> float:
        idx = self.above_threshold
        if len(idx) == 0:
            return 1.0
        return float(np.mean(self.std_semi[idx] <= self.std_full[idx]))

    def to_csv(self, path, grid: SourceGrid, config_hash: Optional[str] = None) -> None:
        lines = []
        if config_hash is not None:
            lines.append(f"# config_hash={config_hash}")
        lines.append(f"# runs={self.runs} particles={self.particle_count} threshold={self.threshold!r}")
        lines.append("grid_index,x,y,z,std_full,std_semianalytic")
        for c in range(len(self.std_full)):
            x, y, z = grid.points[c]
            lines.append(
                f"{c},{x!r},{y!r},{z!r},{self.std_full[c]!r},{self.std_semi[c]!r}"
            )
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def _intensity_vector(weights: np.ndarray, configs: list[DipoleConfig], n_grid: int) -> np.ndarray:
    out = np.zeros(n_grid)
    for config, w in zip(configs, weights):
        for c in config.indices:
            out[c] += w
    return out


_STD_CTX: Optional[tuple] = None


def _std_init(model, y_single, grid, kernel_settings, settings) -> None:
    global _STD_CTX
    _STD_CTX = (model, y_single, grid, kernel_settings, settings)


def _std_task(run_index: int) -> tuple[np.ndarray, np.ndarray]:
    from .smc import run as run_semi

    model, y_single, grid, kernel_settings, settings = _STD_CTX
    run_settings = replace(settings, master_seed=settings.master_seed + run_index)
    n_grid = grid.n_points
    semi_system, _ = run_semi(model, y_single, grid, kernel_settings, run_settings)
    full_system, _ = run_full(model, y_single, grid, kernel_settings, run_settings)
    return (
        _intensity_vector(semi_system.weights, semi_system.configs, n_grid),
        _intensity_vector(full_system.weights, full_system.configs, n_grid),
    )


def intensity_std_experiment(
    model: SemiLinearModel,
    y_single: TimeSeriesData,
    grid: SourceGrid,
    kernel_settings: KernelSettings,
    settings: SmcSettings,
    runs: int,
    threshold: float = 5e-3,
    workers: int = 1,
) -> IntensityStdReport:
    """Sample std over seeded runs of the unconditional intensity measure, for
    the marginalized and full samplers on the same data.

    Runs are independent and seeded individually, so the report does not
    depend on the number of workers or the run order.
    """
    init_args = (model, y_single, grid, kernel_settings, settings)
    if workers > 1:
        import multiprocessing

        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(processes=workers, initializer=_std_init, initargs=init_args) as pool:
            pairs = pool.map(_std_task, range(runs), chunksize=1)
    else:
        _std_init(*init_args)
        pairs = [_std_task(l) for l in range(runs)]
    semi_intensities = np.stack([p[0] for p in pairs])
    full_intensities = np.stack([p[1] for p in pairs])
    ddof = 1 if runs > 1 else 0
    return IntensityStdReport(
        std_full=np.std(full_intensities, axis=0, ddof=ddof),
        std_semi=np.std(semi_intensities, axis=0, ddof=ddof),
        threshold=threshold,
        runs=runs,
        particle_count=settings.particle_count,
    )
