"""Target-invariant transition kernels on dipole configurations.

Two moves are provided, both plain Metropolis-Hastings on the discrete
configuration space (the moments are integrated out, so no trans-dimensional
Jacobian appears):

* a birth/death step: with probability ``p_birth`` propose adding a uniformly
  drawn unoccupied grid point, with probability ``p_death`` propose removing a
  uniformly drawn dipole, otherwise propose nothing.  The Hastings ratio for a
  birth from d to d+1 dipoles is
  ``[p_death / (d+1)] / [p_birth / (n_grid - d)]``; a death is the exact
  reciprocal.  Boundary draws (birth at d_max, death at d = 0) count as
  no-proposal and leave the configuration unchanged.

* a location move: pick one dipole uniformly at random and propose a new
  location among the unoccupied grid points within ``move_radius`` of the old
  one (the old location included), weighted by a Gaussian in the displacement.
  The acceptance ratio carries the full proposal correction
  ``q(new -> old) / q(old -> new)``, whose normalizers differ near grid
  boundaries and near other dipoles.  A sweep applies d such moves, so later
  moves see earlier accepted ones; picking the dipole at random (rather than
  scanning positions in sorted order) is what makes every single move exactly
  reversible on unordered configurations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .forward import SourceGrid
from .model import DipoleConfig

LogPostFn = Callable[[DipoleConfig], float]


@dataclass
class KernelSettings:
    p_birth: float = 1.0 / 3.0
    p_death: float = 1.0 / 20.0
    move_radius: float = 0.01  # meters
    move_sigma: float = 0.006  # meters

    def __post_init__(self) -> None:
        if self.p_birth < 0 or self.p_death < 0 or self.p_birth + self.p_death > 1:
            raise ValueError("p_birth + p_death must lie in [0, 1]")
        if self.move_radius <= 0 or self.move_sigma <= 0:
            raise ValueError("move_radius and move_sigma must be positive")


def birth_log_hastings(d: int, n_grid: int, settings: KernelSettings) -> float:
    """log of [p_death/(d+1)] / [p_birth/(n_grid - d)] for a birth from d dipoles."""
    return math.log(settings.p_death / (d + 1)) - math.log(settings.p_birth / (n_grid - d))


def death_log_hastings(d: int, n_grid: int, settings: KernelSettings) -> float:
    """log Hastings correction for a death from d dipoles (reciprocal of the
    birth correction evaluated at the destination dimension)."""
    return -birth_log_hastings(d - 1, n_grid, settings)


def birth_death_step(
    config: DipoleConfig,
    tempered_logpost_fn: LogPostFn,
    grid: SourceGrid,
    settings: KernelSettings,
    rng: np.random.Generator,
    d_max: int,
) -> tuple[DipoleConfig, bool, str]:
    """One reversible-jump birth/death move.

    Returns ``(new_config, accepted, move_type)`` with move_type in
    ``{"birth", "death", "none"}``.  A boundary draw or a no-proposal draw
    returns the input configuration with move_type ``"none"``.
    """
    n_grid = grid.n_points
    d = config.d
    u = rng.random()
    if u < settings.p_birth:
        if d >= d_max or d >= n_grid:
            return config, False, "none"
        occupied = set(config.indices)
        while True:  # rejection draw = uniform over unoccupied points
            site = int(rng.integers(n_grid))
            if site not in occupied:
                break
        candidate = config.with_added(site)
        log_ratio = (
            tempered_logpost_fn(candidate)
            - tempered_logpost_fn(config)
            + birth_log_hastings(d, n_grid, settings)
        )
        if math.log(rng.random()) < log_ratio:
            return candidate, True, "birth"
        return config, False, "birth"
    if u < settings.p_birth + settings.p_death:
        if d == 0:
            return config, False, "none"
        victim = config.indices[rng.integers(d)]
        candidate = config.with_removed(victim)
        log_ratio = (
            tempered_logpost_fn(candidate)
            - tempered_logpost_fn(config)
            + death_log_hastings(d, n_grid, settings)
        )
        if math.log(rng.random()) < log_ratio:
            return candidate, True, "death"
        return config, False, "death"
    return config, False, "none"


def move_candidates(
    config: DipoleConfig,
    dipole_index: int,
    grid: SourceGrid,
    settings: KernelSettings,
) -> tuple[np.ndarray, np.ndarray]:
    """Proposal support and normalized weights for moving one dipole.

    The support is the set of grid points within ``move_radius`` of the
    dipole's current location that are not occupied by the other dipoles,
    always including the current location itself; weights are proportional to
    ``exp(-|z' - z|^2 / (2 move_sigma^2))``.
    """
    current = config.indices[dipole_index]
    others = set(config.indices) - {current}
    nearby = grid.neighbors_within(settings.move_radius)[current]
    support = np.array([c for c in nearby if c == current or c not in others], dtype=int)
    disp = grid.points[support] - grid.points[current]
    sq_dist = np.sum(disp * disp, axis=1)
    weights = np.exp(-0.5 * sq_dist / settings.move_sigma**2)
    return support, weights / weights.sum()


def _single_location_move(
    config: DipoleConfig,
    dipole_index: int,
    tempered_logpost_fn: LogPostFn,
    grid: SourceGrid,
    settings: KernelSettings,
    rng: np.random.Generator,
) -> tuple[DipoleConfig, bool]:
    current = config.indices[dipole_index]
    support, probs = move_candidates(config, dipole_index, grid, settings)
    if len(support) == 1:
        return config, False  # isolated point, nothing to propose
    choice = int(support[rng.choice(len(support), p=probs)])
    if choice == current:
        return config, True  # self-move, ratio is exactly 1
    candidate = config.with_replaced(current, choice)
    forward_prob = probs[np.searchsorted(support, choice)]
    rev_support, rev_probs = move_candidates(candidate, candidate.indices.index(choice), grid, settings)
    rev_prob = rev_probs[np.searchsorted(rev_support, current)]
    log_ratio = (
        tempered_logpost_fn(candidate)
        - tempered_logpost_fn(config)
        + math.log(rev_prob)
        - math.log(forward_prob)
    )
    if math.log(rng.random()) < log_ratio:
        return candidate, True
    return config, False


def location_sweep(
    config: DipoleConfig,
    tempered_logpost_fn: LogPostFn,
    grid: SourceGrid,
    settings: KernelSettings,
    rng: np.random.Generator,
) -> tuple[DipoleConfig, int]:
    """d single-dipole location moves, each on a uniformly drawn dipole.

    Returns the final configuration and the number of accepted moves.  Later
    moves see earlier accepted ones.
    """
    accepted = 0
    for _ in range(config.d):
        k = int(rng.integers(config.d))
        config, ok = _single_location_move(config, k, tempered_logpost_fn, grid, settings, rng)
        if ok:
            accepted += 1
    return config, accepted
