"""Source grid, sensor geometry, and the dipole lead field.

The forward model is a point current dipole inside a spherically symmetric
conductor, observed by radial magnetometers outside it.  For that sensor type
the measured field component equals the radial component of the free-space
dipole field, which has the closed form

    B_r(s) = (mu0 / 4 pi) * [m x (s - z)] . (s / |s|) / |s - z|^3

for a dipole of moment ``m`` at position ``z`` and a sensor at ``s``.  Volume
currents contribute nothing to the radial component, so the formula is exact
outside the conductor.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

MU0_OVER_4PI = 1e-7
#: physical dipole moment (A*m) corresponding to one unit of dipole strength;
#: all moment-valued quantities in the package are expressed in this unit.
MOMENT_UNIT = 1e-8

GEOMETRY_SCHEMA_VERSION = 1


def unit_dipole_field(source: np.ndarray, moment: np.ndarray, sensor: np.ndarray) -> float:
    """Radial magnetic field at ``sensor`` of a point dipole.

    ``source``, ``moment`` and ``sensor`` are 3-vectors; positions in meters,
    moment in A*m.  Returns the field component along ``sensor/|sensor|`` in
    tesla.  Raises ``ValueError`` if source and sensor coincide or the sensor
    sits at the origin (no radial direction).
    """
    source = np.asarray(source, dtype=float)
    moment = np.asarray(moment, dtype=float)
    sensor = np.asarray(sensor, dtype=float)
    diff = sensor - source
    dist = np.linalg.norm(diff)
    if dist < 1e-12:
        raise ValueError("sensor coincides with the source position")
    sensor_norm = np.linalg.norm(sensor)
    if sensor_norm < 1e-12:
        raise ValueError("sensor at the origin has no radial direction")
    radial = sensor / sensor_norm
    return float(MU0_OVER_4PI * np.dot(np.cross(moment, diff), radial) / dist**3)


@dataclass(eq=False)
class SourceGrid:
    """Candidate source positions, with cached neighborhood lookups."""

    points: np.ndarray  # (n_points, 3) meters
    neighbor_radius: float = 0.01

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if self.neighbor_radius <= 0:
            raise ValueError("neighbor_radius must be positive")
        if len(np.unique(self.points, axis=0)) != len(self.points):
            raise ValueError("grid points must be distinct")
        self._tree = cKDTree(self.points)
        self._neighbor_cache: dict[float, list[np.ndarray]] = {}

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    def neighbors_within(self, radius: float) -> list[np.ndarray]:
        """Indices within ``radius`` of each grid point (the point included).

        Radius comparison carries a 1e-9 relative slack so lattice spacings
        equal to the radius are reliably included despite rounding.
        """
        cached = self._neighbor_cache.get(radius)
        if cached is None:
            lists = self._tree.query_ball_point(self.points, r=radius * (1.0 + 1e-9))
            cached = [np.array(sorted(ix), dtype=int) for ix in lists]
            self._neighbor_cache[radius] = cached
        return cached


@dataclass(eq=False)
class SensorArray:
    """Radial magnetometer positions (meters)."""

    positions: np.ndarray  # (n_sensors, 3)

    def __post_init__(self) -> None:
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        norms = np.linalg.norm(self.positions, axis=1)
        if np.any(norms < 1e-12):
            raise ValueError("sensor positions must be nonzero")

    @property
    def n_sensors(self) -> int:
        return self.positions.shape[0]

    @property
    def radial_directions(self) -> np.ndarray:
        norms = np.linalg.norm(self.positions, axis=1, keepdims=True)
        return self.positions / norms


@dataclass(eq=False)
class LeadFieldProvider:
    """Precomputed per-grid-point lead field blocks.

    ``blocks[c]`` is the (n_sensors, 3) matrix mapping the moment of a dipole
    at grid point ``c`` (in strength units of ``MOMENT_UNIT`` A*m) to the
    sensor readings in tesla.
    """

    blocks: np.ndarray  # (n_points, n_sensors, 3)

    def __post_init__(self) -> None:
        self.blocks = np.asarray(self.blocks, dtype=float)
        if self.blocks.ndim != 3 or self.blocks.shape[2] != 3:
            raise ValueError("blocks must have shape (n_points, n_sensors, 3)")
        if not np.all(np.isfinite(self.blocks)):
            raise ValueError("lead field entries must be finite")

    @classmethod
    def from_geometry(
        cls,
        grid: SourceGrid,
        sensors: SensorArray,
        moment_scale: float = MOMENT_UNIT,
    ) -> "LeadFieldProvider":
        diff = sensors.positions[None, :, :] - grid.points[:, None, :]  # (C, S, 3)
        dist3 = np.linalg.norm(diff, axis=2) ** 3
        radial = sensors.radial_directions  # (S, 3)
        # (e_j x diff) . radial for the three moment axes
        bx = diff[:, :, 1] * radial[None, :, 2] - diff[:, :, 2] * radial[None, :, 1]
        by = diff[:, :, 2] * radial[None, :, 0] - diff[:, :, 0] * radial[None, :, 2]
        bz = diff[:, :, 0] * radial[None, :, 1] - diff[:, :, 1] * radial[None, :, 0]
        blocks = np.stack([bx, by, bz], axis=2) * (MU0_OVER_4PI * moment_scale)
        blocks /= dist3[:, :, None]
        return cls(blocks=blocks)

    @classmethod
    def from_blocks(cls, blocks: np.ndarray) -> "LeadFieldProvider":
        return cls(blocks=np.asarray(blocks, dtype=float))

    @property
    def n_points(self) -> int:
        return self.blocks.shape[0]

    @property
    def n_sensors(self) -> int:
        return self.blocks.shape[1]

    def block(self, index: int) -> np.ndarray:
        return self.blocks[index]


def assemble_lead_field(provider: LeadFieldProvider, indices) -> np.ndarray:
    """Horizontal concatenation of per-grid-point blocks, (n_sensors, 3d).

    ``indices`` is any iterable of grid indices (typically
    ``DipoleConfig.indices``); an empty configuration yields an
    (n_sensors, 0) matrix.
    """
    idx = list(indices)
    if not idx:
        return np.zeros((provider.n_sensors, 0))
    return np.concatenate([provider.blocks[c] for c in idx], axis=1)


def _fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n)
    golden = (1.0 + np.sqrt(5.0)) / 2.0
    z = 1.0 - 2.0 * (i + 0.5) / n
    rho = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = 2.0 * np.pi * i / golden
    return np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)


def build_default_geometry(
    seed: int = 0,
    grid_spacing: float = 0.01,
    grid_radius: float = 0.08,
    n_sensors: int = 60,
    sensor_radius: float = 0.11,
) -> tuple[SourceGrid, SensorArray]:
    """Deterministic cubic-lattice grid inside a sphere plus a quasi-uniform
    sensor shell.

    The seed rotates the sensor shell about the z axis; grid construction is
    seed-independent.  Same seed, same geometry, bit for bit.
    """
    m = int(np.floor(grid_radius / grid_spacing))
    axis = np.arange(-m, m + 1)
    ii, jj, kk = np.meshgrid(axis, axis, axis, indexing="ij")
    # strictly inside; small slack keeps boundary exclusion deterministic
    limit = (grid_radius / grid_spacing) ** 2 - 1e-9
    mask = ii**2 + jj**2 + kk**2 < limit
    points = np.stack([ii[mask], jj[mask], kk[mask]], axis=1) * grid_spacing
    order = np.lexsort((points[:, 2], points[:, 1], points[:, 0]))
    grid = SourceGrid(points=points[order], neighbor_radius=grid_spacing)

    angle = (int(seed) % 360) * np.pi / 180.0
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    shell = _fibonacci_sphere(n_sensors) @ rot.T
    sensors = SensorArray(positions=shell * sensor_radius)
    return grid, sensors


def geometry_to_json(grid: SourceGrid, sensors: SensorArray) -> str:
    doc = {
        "schema_version": GEOMETRY_SCHEMA_VERSION,
        "grid": grid.points.tolist(),
        "sensors": sensors.positions.tolist(),
    }
    return json.dumps(doc)


def geometry_from_json(text: str) -> tuple[SourceGrid, SensorArray]:
    doc = json.loads(text)
    for key in ("grid", "sensors"):
        if key not in doc:
            raise ValueError(f"geometry document missing '{key}'")
    grid = SourceGrid(points=np.array(doc["grid"], dtype=float))
    sensors = SensorArray(positions=np.array(doc["sensors"], dtype=float))
    return grid, sensors
