"""Synthetic multi-dipole datasets.

Dipole locations are drawn uniformly on the grid subject to a minimum pairwise
separation; orientations are uniform on the unit sphere and fixed in time.
Strength time courses are raised-cosine bumps: consecutive bumps on disjoint
support for uncorrelated sources, one shared bump for perfectly correlated
sources.  Clean data is the lead field applied to the moments; white Gaussian
noise of fixed standard deviation is added on top (by default 5% of the peak
of the clean signal).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .forward import LeadFieldProvider, SensorArray, SourceGrid, assemble_lead_field
from .model import DipoleConfig, TimeSeriesData

DATASET_SCHEMA_VERSION = 1
MAX_LOCATION_ATTEMPTS = 100_000


@dataclass
class ScenarioSpec:
    n_dipoles: int
    correlated: bool
    n_time: int = 30
    noise_std: Optional[float] = None  # None: 5% of the clean-signal peak
    min_separation: float = 0.01
    seed: int = 0
    peak_strengths: Optional[Sequence[float]] = None

    def __post_init__(self) -> None:
        if not 2 <= self.n_dipoles <= 4:
            raise ValueError("n_dipoles must be between 2 and 4")
        if self.n_time < 1:
            raise ValueError("n_time must be positive")
        if self.noise_std is not None and self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")
        if self.peak_strengths is not None:
            if len(self.peak_strengths) != self.n_dipoles:
                raise ValueError("need one peak strength per dipole")
            if any(s <= 0 for s in self.peak_strengths):
                raise ValueError("peak strengths must be positive")

    def resolved_peaks(self) -> np.ndarray:
        if self.peak_strengths is None:
            return np.ones(self.n_dipoles)
        return np.asarray(self.peak_strengths, dtype=float)


@dataclass(eq=False)
class GroundTruth:
    config: DipoleConfig
    orientations: np.ndarray  # (d, 3) unit vectors
    moments: np.ndarray  # (n_time, 3d), aligned with config.indices order
    clean_data: TimeSeriesData
    noisy_data: TimeSeriesData
    noise_std: float
    scenario: Optional[ScenarioSpec] = None

    def strength(self, dipole: int) -> np.ndarray:
        block = self.moments[:, 3 * dipole : 3 * dipole + 3]
        return np.linalg.norm(block, axis=1)


def raised_cosine_bump(length: int) -> np.ndarray:
    """Smooth bump on [0, length): zero at the ends, peak value exactly 1."""
    if length == 1:
        return np.ones(1)
    t = np.arange(length)
    bump = 0.5 * (1.0 - np.cos(2.0 * np.pi * (t + 0.5) / length))
    return bump / bump.max()


def _strength_courses(spec: ScenarioSpec) -> np.ndarray:
    """(n_time, d) strength curves with unit peaks."""
    d, n_t = spec.n_dipoles, spec.n_time
    courses = np.zeros((n_t, d))
    if spec.correlated:
        bump = raised_cosine_bump(n_t)
        for k in range(d):
            courses[:, k] = bump
        return courses
    # consecutive disjoint blocks, earlier blocks take the remainder
    base = n_t // d
    sizes = [base + (1 if k < n_t % d else 0) for k in range(d)]
    start = 0
    for k, size in enumerate(sizes):
        courses[start : start + size, k] = raised_cosine_bump(size)
        start += size
    return courses


def _draw_locations(spec: ScenarioSpec, grid: SourceGrid, rng: np.random.Generator) -> tuple[int, ...]:
    for _ in range(MAX_LOCATION_ATTEMPTS):
        sites = rng.choice(grid.n_points, size=spec.n_dipoles, replace=False)
        pts = grid.points[sites]
        dists = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=2)
        np.fill_diagonal(dists, np.inf)
        if dists.min() >= spec.min_separation:
            return tuple(int(s) for s in sites)
    raise RuntimeError(
        f"could not place {spec.n_dipoles} dipoles at separation {spec.min_separation} "
        f"within {MAX_LOCATION_ATTEMPTS} attempts; grid too small"
    )


def generate(
    spec: ScenarioSpec,
    grid: SourceGrid,
    sensors: SensorArray,
    provider: Optional[LeadFieldProvider] = None,
) -> GroundTruth:
    """Deterministic (per seed) synthetic dataset for one scenario."""
    if provider is None:
        provider = LeadFieldProvider.from_geometry(grid, sensors)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(spec.seed))))

    sites = _draw_locations(spec, grid, rng)
    config = DipoleConfig(sites)
    # orientations drawn in site order, then aligned to the canonical sorted order
    raw = rng.normal(size=(spec.n_dipoles, 3))
    raw /= np.linalg.norm(raw, axis=1, keepdims=True)
    order = np.argsort(np.array(sites))
    orientations = raw[order]

    courses = _strength_courses(spec)[:, order] * spec.resolved_peaks()[order]
    moments = np.zeros((spec.n_time, 3 * spec.n_dipoles))
    for k in range(spec.n_dipoles):
        moments[:, 3 * k : 3 * k + 3] = courses[:, k : k + 1] * orientations[k]

    g = assemble_lead_field(provider, config.indices)
    clean = g @ moments.T  # (n_sensors, n_time)
    noise_std = spec.noise_std
    if noise_std is None:
        noise_std = 0.05 * float(np.max(np.abs(clean)))
    noisy = clean + rng.normal(0.0, 1.0, size=clean.shape) * noise_std
    return GroundTruth(
        config=config,
        orientations=orientations,
        moments=moments,
        clean_data=TimeSeriesData(values=clean),
        noisy_data=TimeSeriesData(values=noisy),
        noise_std=noise_std,
        scenario=spec,
    )


def window(data: TimeSeriesData, center_index: int, lengths: Sequence[int]) -> list[TimeSeriesData]:
    """Centered slices of the time series.

    A window of length L starts floor((L-1)/2) samples before the center.
    """
    out = []
    for length in lengths:
        if length < 1:
            raise ValueError("window length must be positive")
        start = center_index - (length - 1) // 2
        stop = start + length
        if start < 0 or stop > data.n_times:
            raise ValueError(
                f"window of length {length} centered at {center_index} exceeds the series"
            )
        out.append(TimeSeriesData(values=data.values[:, start:stop].copy()))
    return out


def dataset_to_json(truth: GroundTruth) -> str:
    spec = truth.scenario
    doc = {
        "schema_version": DATASET_SCHEMA_VERSION,
        "scenario": None
        if spec is None
        else {
            "n_dipoles": spec.n_dipoles,
            "correlated": spec.correlated,
            "n_time": spec.n_time,
            "noise_std": truth.noise_std,
            "min_separation": spec.min_separation,
            "seed": spec.seed,
            "peak_strengths": [float(s) for s in spec.resolved_peaks()],
        },
        "n_sensors": truth.noisy_data.n_sensors,
        "n_times": truth.noisy_data.n_times,
        "ground_truth": {
            "indices": list(truth.config.indices),
            "orientations": truth.orientations.tolist(),
            "moments": truth.moments.tolist(),
        },
        "noise_std": truth.noise_std,
        "clean": truth.clean_data.values.reshape(-1).tolist(),  # row-major
        "noisy": truth.noisy_data.values.reshape(-1).tolist(),
    }
    return json.dumps(doc)


def dataset_from_json(text: str) -> GroundTruth:
    doc = json.loads(text)
    required = ("n_sensors", "n_times", "ground_truth", "noisy", "clean", "noise_std")
    for key in required:
        if key not in doc:
            raise ValueError(f"dataset document missing '{key}'")
    n_s, n_t = int(doc["n_sensors"]), int(doc["n_times"])
    clean = np.array(doc["clean"], dtype=float).reshape(n_s, n_t)
    noisy = np.array(doc["noisy"], dtype=float).reshape(n_s, n_t)
    gt = doc["ground_truth"]
    spec = None
    if doc.get("scenario"):
        s = doc["scenario"]
        spec = ScenarioSpec(
            n_dipoles=int(s["n_dipoles"]),
            correlated=bool(s["correlated"]),
            n_time=int(s["n_time"]),
            noise_std=float(s["noise_std"]),
            min_separation=float(s["min_separation"]),
            seed=int(s["seed"]),
            peak_strengths=s.get("peak_strengths"),
        )
    return GroundTruth(
        config=DipoleConfig(tuple(gt["indices"])),
        orientations=np.array(gt["orientations"], dtype=float),
        moments=np.array(gt["moments"], dtype=float),
        clean_data=TimeSeriesData(values=clean),
        noisy_data=TimeSeriesData(values=noisy),
        noise_std=float(doc["noise_std"]),
        scenario=spec,
    )
