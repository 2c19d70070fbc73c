"""Point estimation from the final particle system and discrepancy metrics.

The estimated dipole count is the mode of the weighted count distribution;
locations are the highest local modes of the intensity measure conditioned on
that count (greedy peak extraction with a suppression radius); moments are the
analytic conditional posterior means at the estimated configuration.

The localization error is an assignment-style distance without cardinality
penalty: the smaller configuration is matched injectively into the larger one
so as to minimize the mean paired distance.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .forward import SourceGrid
from .model import (
    DipoleConfig,
    MomentPosterior,
    SemiLinearModel,
    TimeSeriesData,
    conditional_moment_posterior,
)
from .smc import ParticleSystem

SUPPRESSION_RADIUS = 0.02  # meters, for local-mode extraction
SUMMARY_SCHEMA_VERSION = 1


class EstimationError(RuntimeError):
    """Point estimation could not be carried out on this particle system."""


@dataclass
class Discrepancy:
    delta_d: int
    delta_c: float


@dataclass(eq=False)
class PosteriorSummary:
    number_posterior: np.ndarray  # probabilities over d = 0..d_max
    intensity_conditional: dict[int, float]
    intensity_unconditional: dict[int, float]
    d_hat: int
    locations_hat: list[int]
    moment_posterior: Optional[MomentPosterior]
    peak_shortfall: bool = False


def number_posterior(system: ParticleSystem, d_max: int) -> np.ndarray:
    """Weighted distribution of the dipole count, P(D = d | y) for d in [0, d_max]."""
    probs = np.zeros(d_max + 1)
    for config, w in zip(system.configs, system.weights):
        probs[config.d] += w
    return probs


def conditional_intensity(system: ParticleSystem, d_hat: int) -> dict[int, float]:
    """Expected dipole count per grid point among particles with d = d_hat."""
    intensity: dict[int, float] = {}
    found = False
    for config, w in zip(system.configs, system.weights):
        if config.d != d_hat:
            continue
        found = True
        for c in config.indices:
            intensity[c] = intensity.get(c, 0.0) + float(w)
    if not found:
        raise EstimationError(f"no particle carries {d_hat} dipoles")
    return intensity


def unconditional_intensity(system: ParticleSystem) -> dict[int, float]:
    """Expected dipole count per grid point, all particles contributing."""
    intensity: dict[int, float] = {}
    for config, w in zip(system.configs, system.weights):
        for c in config.indices:
            intensity[c] = intensity.get(c, 0.0) + float(w)
    return intensity


def extract_peak_locations(
    intensity: dict[int, float],
    grid: SourceGrid,
    d_hat: int,
    suppression_radius: float = SUPPRESSION_RADIUS,
) -> tuple[list[int], bool]:
    """Greedy extraction of d_hat intensity peaks.

    Repeatedly picks the grid index with the largest intensity (ties broken
    toward the lower index) and suppresses everything within the suppression
    radius.  Returns the peaks in extraction order and a shortfall flag set
    when fewer than d_hat separated peaks exist.
    """
    if not intensity:
        raise EstimationError("empty intensity map")
    remaining = dict(intensity)
    peaks: list[int] = []
    while len(peaks) < d_hat and remaining:
        best_idx = -1
        best_val = -np.inf
        for idx in sorted(remaining):
            if remaining[idx] > best_val:
                best_idx, best_val = idx, remaining[idx]
        peaks.append(best_idx)
        center = grid.points[best_idx]
        for idx in list(remaining):
            if np.linalg.norm(grid.points[idx] - center) <= suppression_radius:
                del remaining[idx]
    return peaks, len(peaks) < d_hat


def estimate_moments(
    model: SemiLinearModel,
    d_hat: int,
    locations_hat: list[int],
    y: TimeSeriesData,
) -> MomentPosterior:
    """Conditional moment posterior at the estimated configuration.

    With no estimated dipoles the posterior is empty (zero moment
    dimensions); callers should treat that as an estimation shortfall.
    """
    if d_hat == 0 or not locations_hat:
        return MomentPosterior(means=np.zeros((y.n_times, 0)), covariance=np.zeros((0, 0)))
    return conditional_moment_posterior(model, DipoleConfig(tuple(locations_hat)), y)


def summarize(
    system: ParticleSystem,
    model: SemiLinearModel,
    grid: SourceGrid,
    y: TimeSeriesData,
) -> PosteriorSummary:
    """Full point-estimation pipeline on a final particle system."""
    probs = number_posterior(system, model.d_max)
    d_hat = int(np.argmax(probs))  # first maximum = smaller count on ties
    uncond = unconditional_intensity(system)
    if d_hat == 0:
        return PosteriorSummary(
            number_posterior=probs,
            intensity_conditional={},
            intensity_unconditional=uncond,
            d_hat=0,
            locations_hat=[],
            moment_posterior=None,
            peak_shortfall=False,
        )
    cond = conditional_intensity(system, d_hat)
    peaks, shortfall = extract_peak_locations(cond, grid, d_hat)
    moments = estimate_moments(model, len(peaks), peaks, y)
    return PosteriorSummary(
        number_posterior=probs,
        intensity_conditional=cond,
        intensity_unconditional=uncond,
        d_hat=d_hat,
        locations_hat=peaks,
        moment_posterior=moments,
        peak_shortfall=shortfall,
    )


def delta_d(true_config: DipoleConfig, est_config: DipoleConfig) -> int:
    """Estimated minus true dipole count."""
    return est_config.d - true_config.d


def best_pairing(
    small_points: np.ndarray, large_points: np.ndarray
) -> tuple[float, tuple[int, ...]]:
    """Minimum mean distance over injections of the smaller point set into the
    larger; brute force over all injections.

    Returns (mean distance, assignment) where assignment[k] is the index in
    the larger set paired with point k of the smaller set.
    """
    n_small = len(small_points)
    n_large = len(large_points)
    if n_small > n_large:
        raise ValueError("first argument must be the smaller set")
    dists = np.linalg.norm(small_points[:, None, :] - large_points[None, :, :], axis=2)
    best = np.inf
    best_assign: tuple[int, ...] = ()
    for perm in itertools.permutations(range(n_large), n_small):
        total = sum(dists[k, perm[k]] for k in range(n_small))
        if total < best:
            best = total
            best_assign = perm
    return best / n_small, best_assign


def delta_c(true_config: DipoleConfig, est_config: DipoleConfig, grid: SourceGrid) -> float:
    """Localization error without cardinality penalty.

    Every dipole of the smaller configuration is matched to a distinct dipole
    of the larger one, minimizing the mean distance over all injections.
    """
    if true_config.d == 0 or est_config.d == 0:
        raise EstimationError("localization error undefined for empty configurations")
    true_pts = grid.points[list(true_config.indices)]
    est_pts = grid.points[list(est_config.indices)]
    if true_config.d >= est_config.d:
        value, _ = best_pairing(est_pts, true_pts)
    else:
        value, _ = best_pairing(true_pts, est_pts)
    return float(value)


def summary_to_json(summary: PosteriorSummary, grid: SourceGrid, config_hash: Optional[str] = None) -> str:
    doc = {
        "schema_version": SUMMARY_SCHEMA_VERSION,
        "number_posterior": [float(p) for p in summary.number_posterior],
        "d_hat": summary.d_hat,
        "locations_hat": {
            "indices": list(summary.locations_hat),
            "coordinates": [grid.points[c].tolist() for c in summary.locations_hat],
        },
        "intensity_conditional": {str(k): float(v) for k, v in sorted(summary.intensity_conditional.items())},
        "intensity_unconditional": {str(k): float(v) for k, v in sorted(summary.intensity_unconditional.items())},
        "moment_means": None
        if summary.moment_posterior is None
        else summary.moment_posterior.means.tolist(),
        "peak_shortfall": summary.peak_shortfall,
    }
    if config_hash is not None:
        doc["config_hash"] = config_hash
    return json.dumps(doc)
