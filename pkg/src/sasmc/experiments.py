"""Drivers for the three simulation experiments.

* experiment 1: fleets of synthetic datasets (2-4 dipoles, correlated or not),
  discrepancy statistics of the estimated count and locations, and averaged
  reconstructed strength curves per group.
* experiment 2: run-to-run standard deviation of the intensity measure for the
  marginalized and the full sampler on one single-time-point dataset.
* experiment 3: run time of the marginalized sampler on centered windows of
  increasing length cut from one dataset.
"""

from __future__ import annotations

import math
import multiprocessing
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .estimation import best_pairing, delta_c, delta_d, summarize
from .forward import LeadFieldProvider, SensorArray, SourceGrid, build_default_geometry
from .fullsmc import intensity_std_experiment, IntensityStdReport
from .kernels import KernelSettings
from .model import DipoleConfig, SemiLinearModel, TimeSeriesData
from .simulate import GroundTruth, ScenarioSpec, generate, window
from .smc import SmcSettings, run

GROUP_TOKENS = {
    "2u": (2, False),
    "3u": (3, False),
    "4u": (4, False),
    "2c": (2, True),
    "3c": (3, True),
    "4c": (4, True),
}
DEFAULT_GROUPS = ("2u", "3u", "4u", "2c", "3c", "4c")

DEFAULT_SIGMA_Q = 1.0
DEFAULT_POISSON_LAMBDA = 0.25
DEFAULT_D_MAX = 10


def group_label(token: str) -> str:
    n, corr = GROUP_TOKENS[token]
    return f"{n}-{'corr' if corr else 'unc'}"


def derived_seed(*parts: int) -> int:
    """Stable 32-bit seed from a tuple of integers."""
    seq = np.random.SeedSequence(entropy=[int(p) for p in parts])
    return int(seq.generate_state(1)[0])


def build_model(
    provider: LeadFieldProvider,
    n_times: int,
    sigma_e: float,
    sigma_q: float = DEFAULT_SIGMA_Q,
    poisson_lambda: float = DEFAULT_POISSON_LAMBDA,
    d_max: int = DEFAULT_D_MAX,
) -> SemiLinearModel:
    return SemiLinearModel(
        sensor_count=provider.n_sensors,
        time_count=n_times,
        sigma_q=sigma_q,
        sigma_e=sigma_e,
        poisson_lambda=poisson_lambda,
        d_max=d_max,
        forward=provider,
    )


@dataclass
class DatasetResult:
    group: str
    replicate: int
    data_seed: int
    d_true: int
    d_hat: int
    delta_d: int
    delta_c_m: float  # nan when undefined
    iterations: int
    seconds: float
    true_strengths: np.ndarray  # (n_time, d_true)
    est_strengths: Optional[np.ndarray]  # (n_time, d_true) aligned, None on count mismatch


@dataclass
class GroupRow:
    label: str
    n_datasets: int
    mean_delta_d: float
    std_delta_d: float
    mean_delta_c_m: float
    std_delta_c_m: float
    n_undefined_delta_c: int


@dataclass
class Experiment1Result:
    rows: list[GroupRow]
    curves: dict[str, tuple[np.ndarray, np.ndarray, int]]  # label -> (true mean, est mean, n used)
    per_run: list[DatasetResult]


_EXP1_CTX: Optional[tuple] = None


def _exp1_init(grid, sensors, provider, particles, sigma_q, poisson_lambda, d_max) -> None:
    global _EXP1_CTX
    _EXP1_CTX = (grid, sensors, provider, particles, sigma_q, poisson_lambda, d_max)


def _exp1_task(task: tuple[str, int, int]) -> DatasetResult:
    token, replicate, data_seed = task
    grid, sensors, provider, particles, sigma_q, poisson_lambda, d_max = _EXP1_CTX
    n_dipoles, correlated = GROUP_TOKENS[token]
    spec = ScenarioSpec(n_dipoles=n_dipoles, correlated=correlated, seed=data_seed)
    truth = generate(spec, grid, sensors, provider)
    model = build_model(
        provider,
        truth.noisy_data.n_times,
        sigma_e=truth.noise_std,
        sigma_q=sigma_q,
        poisson_lambda=poisson_lambda,
        d_max=d_max,
    )
    settings = SmcSettings(particle_count=particles, master_seed=data_seed)
    system, trace = run(model, truth.noisy_data, grid, KernelSettings(), settings)
    summary = summarize(system, model, grid, truth.noisy_data)

    d_true = truth.config.d
    dd = summary.d_hat - d_true
    if summary.locations_hat:
        est_config = DipoleConfig(tuple(summary.locations_hat))
        dc = delta_c(truth.config, est_config, grid)
    else:
        dc = math.nan

    true_strengths = np.stack([truth.strength(k) for k in range(d_true)], axis=1)
    est_strengths = None
    if summary.d_hat == d_true and summary.moment_posterior is not None and not summary.peak_shortfall:
        est_config = DipoleConfig(tuple(summary.locations_hat))
        est_pts = grid.points[list(est_config.indices)]
        true_pts = grid.points[list(truth.config.indices)]
        _, assign = best_pairing(est_pts, true_pts)
        est_strengths = np.zeros_like(true_strengths)
        for j in range(d_true):
            est_strengths[:, assign[j]] = summary.moment_posterior.strength(j)
    return DatasetResult(
        group=group_label(token),
        replicate=replicate,
        data_seed=data_seed,
        d_true=d_true,
        d_hat=summary.d_hat,
        delta_d=dd,
        delta_c_m=dc,
        iterations=trace.n_iterations,
        seconds=trace.total_seconds,
        true_strengths=true_strengths,
        est_strengths=est_strengths,
    )


def experiment1(
    out_dir,
    n_per_group: int = 20,
    particles: int = 1000,
    master_seed: int = 0,
    workers: int = 1,
    groups: Sequence[str] = DEFAULT_GROUPS,
    geometry_seed: int = 0,
    sigma_q: float = DEFAULT_SIGMA_Q,
    poisson_lambda: float = DEFAULT_POISSON_LAMBDA,
    d_max: int = DEFAULT_D_MAX,
    config_hash: Optional[str] = None,
) -> Experiment1Result:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for token in groups:
        if token not in GROUP_TOKENS:
            raise ValueError(f"unknown group token {token!r}")
    grid, sensors = build_default_geometry(geometry_seed)
    provider = LeadFieldProvider.from_geometry(grid, sensors)

    tasks = []
    for gi, token in enumerate(groups):
        for rep in range(n_per_group):
            tasks.append((token, rep, derived_seed(master_seed, gi, rep)))

    init_args = (grid, sensors, provider, particles, sigma_q, poisson_lambda, d_max)
    if workers > 1:
        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(processes=workers, initializer=_exp1_init, initargs=init_args) as pool:
            results = pool.map(_exp1_task, tasks, chunksize=1)
    else:
        _exp1_init(*init_args)
        results = [_exp1_task(t) for t in tasks]

    rows = []
    curves: dict[str, tuple[np.ndarray, np.ndarray, int]] = {}
    for token in groups:
        label = group_label(token)
        group_results = [r for r in results if r.group == label]
        dds = np.array([r.delta_d for r in group_results], dtype=float)
        dcs = np.array([r.delta_c_m for r in group_results], dtype=float)
        defined = dcs[~np.isnan(dcs)]
        rows.append(
            GroupRow(
                label=label,
                n_datasets=len(group_results),
                mean_delta_d=float(np.mean(dds)),
                std_delta_d=float(np.std(dds)),
                mean_delta_c_m=float(np.mean(defined)) if len(defined) else math.nan,
                std_delta_c_m=float(np.std(defined)) if len(defined) else math.nan,
                n_undefined_delta_c=int(np.sum(np.isnan(dcs))),
            )
        )
        matched = [r for r in group_results if r.est_strengths is not None]
        if matched:
            # order dipole slots by true activation time so averages align
            def slot_order(r: DatasetResult) -> np.ndarray:
                return np.argsort(np.argmax(r.true_strengths, axis=0), kind="stable")

            n_time, d = matched[0].true_strengths.shape
            true_sum = np.zeros((n_time, d))
            est_sum = np.zeros((n_time, d))
            for r in matched:
                order = slot_order(r)
                true_sum += r.true_strengths[:, order]
                est_sum += r.est_strengths[:, order]
            curves[label] = (true_sum / len(matched), est_sum / len(matched), len(matched))

    _write_exp1_csv(out_dir, rows, curves, results, config_hash)
    return Experiment1Result(rows=rows, curves=curves, per_run=results)


def _write_exp1_csv(out_dir: Path, rows, curves, results, config_hash) -> None:
    header = [] if config_hash is None else [f"# config_hash={config_hash}"]
    lines = header + [
        "group,n_datasets,mean_delta_d,std_delta_d,mean_delta_c_mm,std_delta_c_mm,n_undefined_delta_c"
    ]
    for row in rows:
        lines.append(
            f"{row.label},{row.n_datasets},{row.mean_delta_d!r},{row.std_delta_d!r},"
            f"{row.mean_delta_c_m * 1e3!r},{row.std_delta_c_m * 1e3!r},{row.n_undefined_delta_c}"
        )
    (out_dir / "exp1_discrepancies.csv").write_text("\n".join(lines) + "\n")

    lines = header + ["group,dipole_slot,time_index,true_strength_mean,est_strength_mean"]
    for label, (true_mean, est_mean, _n) in curves.items():
        n_time, d = true_mean.shape
        for k in range(d):
            for t in range(n_time):
                lines.append(f"{label},{k},{t},{true_mean[t, k]!r},{est_mean[t, k]!r}")
    (out_dir / "exp1_strengths.csv").write_text("\n".join(lines) + "\n")

    lines = header + [
        "group,replicate,data_seed,d_true,d_hat,delta_d,delta_c_mm,iterations,seconds"
    ]
    for r in results:
        dc_mm = "" if math.isnan(r.delta_c_m) else repr(r.delta_c_m * 1e3)
        lines.append(
            f"{r.group},{r.replicate},{r.data_seed},{r.d_true},{r.d_hat},{r.delta_d},"
            f"{dc_mm},{r.iterations},{r.seconds!r}"
        )
    (out_dir / "exp1_runs.csv").write_text("\n".join(lines) + "\n")


def make_two_dipole_single_topography(
    grid: SourceGrid,
    sensors: SensorArray,
    provider: Optional[LeadFieldProvider] = None,
    noise_seed: int = 0,
    noise_fraction: float = 0.05,
) -> GroundTruth:
    """Single-time-point dataset with two unit-strength dipoles, one deeper
    than the other, oriented along coordinate axes."""
    if provider is None:
        provider = LeadFieldProvider.from_geometry(grid, sensors)
    deep_target = np.array([0.01, 0.015, 0.02])
    shallow_target = np.array([0.035, 0.02, 0.055])
    deep = int(np.argmin(np.linalg.norm(grid.points - deep_target, axis=1)))
    shallow = int(np.argmin(np.linalg.norm(grid.points - shallow_target, axis=1)))
    if deep == shallow:
        raise ValueError("degenerate grid: deep and shallow sites coincide")
    config = DipoleConfig((deep, shallow))
    orientations = np.zeros((2, 3))
    orientations[config.indices.index(deep)] = [1.0, 0.0, 0.0]
    orientations[config.indices.index(shallow)] = [0.0, 1.0, 0.0]
    moments = orientations.reshape(1, 6).copy()
    from .forward import assemble_lead_field

    clean = assemble_lead_field(provider, config.indices) @ moments[0]
    noise_std = noise_fraction * float(np.max(np.abs(clean)))
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(noise_seed))))
    noisy = clean + rng.normal(0.0, 1.0, size=clean.shape) * noise_std
    return GroundTruth(
        config=config,
        orientations=orientations,
        moments=moments,
        clean_data=TimeSeriesData(values=clean[:, None]),
        noisy_data=TimeSeriesData(values=noisy[:, None]),
        noise_std=noise_std,
        scenario=None,
    )


def experiment2(
    out_dir,
    runs: int = 50,
    particles: int = 100,
    master_seed: int = 0,
    workers: int = 1,
    geometry_seed: int = 0,
    threshold: float = 5e-3,
    config_hash: Optional[str] = None,
) -> IntensityStdReport:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    grid, sensors = build_default_geometry(geometry_seed)
    provider = LeadFieldProvider.from_geometry(grid, sensors)
    truth = make_two_dipole_single_topography(grid, sensors, provider, noise_seed=derived_seed(master_seed, 99))
    model = build_model(provider, 1, sigma_e=truth.noise_std)
    settings = SmcSettings(particle_count=particles, master_seed=master_seed)
    report = intensity_std_experiment(
        model, truth.noisy_data, grid, KernelSettings(), settings, runs=runs,
        threshold=threshold, workers=workers,
    )
    report.to_csv(out_dir / "exp2_intensity_std.csv", grid, config_hash=config_hash)
    fraction = report.fraction_semi_not_worse
    verdict = f"semi_not_worse_fraction={fraction!r} criterion=0.8 pass={fraction >= 0.8}"
    (out_dir / "exp2_verdict.txt").write_text(verdict + "\n")
    return report


@dataclass
class WindowTiming:
    window_length: int
    seconds: float
    iterations: int
    d_hat: int


def experiment3(
    out_dir,
    lengths: Sequence[int] = (1, 5, 10, 20, 30),
    particles: int = 1000,
    master_seed: int = 0,
    workers: int = 1,
    geometry_seed: int = 0,
    config_hash: Optional[str] = None,
) -> list[WindowTiming]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    grid, sensors = build_default_geometry(geometry_seed)
    provider = LeadFieldProvider.from_geometry(grid, sensors)
    spec = ScenarioSpec(n_dipoles=2, correlated=True, n_time=30, seed=derived_seed(master_seed, 3))
    truth = generate(spec, grid, sensors, provider)
    center = truth.noisy_data.n_times // 2
    windows = window(truth.noisy_data, center, list(lengths))

    timings = []
    for length, y_win in zip(lengths, windows):
        model = build_model(provider, y_win.n_times, sigma_e=truth.noise_std)
        settings = SmcSettings(particle_count=particles, master_seed=master_seed)
        system, trace = run(model, y_win, grid, KernelSettings(), settings, workers=workers)
        summary = summarize(system, model, grid, y_win)
        timings.append(
            WindowTiming(
                window_length=length,
                seconds=trace.total_seconds,
                iterations=trace.n_iterations,
                d_hat=summary.d_hat,
            )
        )
    header = [] if config_hash is None else [f"# config_hash={config_hash}"]
    lines = header + ["window_length,seconds,iterations,d_hat"]
    for t in timings:
        lines.append(f"{t.window_length},{t.seconds!r},{t.iterations},{t.d_hat}")
    (out_dir / "exp3_timings.csv").write_text("\n".join(lines) + "\n")
    return timings
