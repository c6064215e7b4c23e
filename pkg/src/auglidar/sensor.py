"""Multi-beam scanner geometry, noise and return-energy model."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError, dump_dataclass, load_dataclass, parse_kv

LITERAL = "literal"
COSINE = "cosine"

# dimmest target that must still be dropped at max range by the default threshold
_DEFAULT_DROP_REFLECTIVITY = 0.05


class TooFewPoints(ValueError):
    pass


@dataclass(frozen=True)
class SensorConfig:
    """Scanner parameters. Angles in degrees, lengths in meters.

    Defaults describe an HDL-64E-style unit. ``energy_threshold`` of None
    selects the value that drops a reflectivity-0.05 target at max range.
    ``beam_offset_sigma_deg`` perturbs the ideal beam angles once per
    sensor instance (seeded by ``sensor_seed``) unless a calibrated
    ``beam_table`` CSV is given.
    """

    channels: int = 64
    vertical_min_deg: float = -24.33
    vertical_max_deg: float = 2.0
    horizontal_fov_deg: float = 360.0
    azimuth_step_deg: float = 0.2
    max_range: float = 120.0
    emit_energy: float = 1.0
    air_attenuation: float = 0.004
    energy_threshold: float | None = None
    distance_noise: float = 0.005
    azimuth_noise_deg: float = 0.05
    vertical_noise_deg: float = 0.05
    beam_offset_sigma_deg: float = 1.0
    sensor_seed: int = 0
    incidence_convention: str = LITERAL
    beam_table: Path | None = None

    def __post_init__(self):
        if self.channels < 1:
            raise ConfigError("channels must be >= 1")
        if not self.vertical_min_deg < self.vertical_max_deg:
            raise ConfigError("vertical_min_deg must be below vertical_max_deg")
        if not self.azimuth_step_deg > 0:
            raise ConfigError("azimuth_step_deg must be positive")
        if not 0 < self.horizontal_fov_deg <= 360:
            raise ConfigError("horizontal_fov_deg must lie in (0, 360]")
        if not self.max_range > 0:
            raise ConfigError("max_range must be positive")
        for name in ("distance_noise", "azimuth_noise_deg", "vertical_noise_deg",
                     "beam_offset_sigma_deg", "air_attenuation"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.energy_threshold is not None and self.energy_threshold < 0:
            raise ConfigError("energy_threshold must be >= 0")
        if self.incidence_convention not in (LITERAL, COSINE):
            raise ConfigError(f"incidence_convention must be {LITERAL!r} or {COSINE!r}")

    @property
    def azimuth_steps(self) -> int:
        return int(round(self.horizontal_fov_deg / self.azimuth_step_deg))

    @property
    def beam_count(self) -> int:
        return self.channels * self.azimuth_steps

    @property
    def threshold(self) -> float:
        if self.energy_threshold is not None:
            return self.energy_threshold
        dim = self.emit_energy * _DEFAULT_DROP_REFLECTIVITY * math.exp(
            -self.air_attenuation * self.max_range)
        return float(np.nextafter(dim, np.inf))

    @classmethod
    def from_file(cls, path) -> SensorConfig:
        path = Path(path)
        return load_dataclass(cls, parse_kv(path.read_text(), str(path)), str(path), path.parent)

    def to_text(self) -> str:
        return dump_dataclass(self, "# auglidar sensor config")


@dataclass(frozen=True, eq=False)
class BeamTable:
    """Per-beam elevation (degrees) and elevation-noise variance (degrees squared)."""

    angles_deg: np.ndarray
    variances_deg2: np.ndarray
    ids: np.ndarray | None = None

    def __post_init__(self):
        angles = np.array(self.angles_deg, dtype=float).reshape(-1)
        var = np.array(self.variances_deg2, dtype=float).reshape(-1)
        ids = np.arange(len(angles)) if self.ids is None else np.array(self.ids).reshape(-1)
        if len(angles) == 0 or len(var) != len(angles) or len(ids) != len(angles):
            raise ValueError("beam table needs matching, non-empty angle/variance/id arrays")
        if np.any(np.diff(angles) <= 0):
            raise ValueError("beam angles must be strictly increasing")
        if np.any(var < 0):
            raise ValueError("beam variances must be non-negative")
        for arr in (angles, var, ids):
            arr.setflags(write=False)
        object.__setattr__(self, "angles_deg", angles)
        object.__setattr__(self, "variances_deg2", var)
        object.__setattr__(self, "ids", ids)

    def __len__(self):
        return len(self.angles_deg)

    @property
    def sigmas_deg(self) -> np.ndarray:
        return np.sqrt(self.variances_deg2)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["beam", "vertical_angle_deg", "variance_deg2"])
            for i, a, v in zip(self.ids.tolist(), self.angles_deg.tolist(),
                               self.variances_deg2.tolist()):
                writer.writerow([i, repr(a), repr(v)])

    @classmethod
    def read_csv(cls, path) -> BeamTable:
        rows = []
        with open(path, newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0].strip().lower() == "beam":
                    continue
                rows.append((int(row[0]), float(row[1]), float(row[2])))
        rows.sort(key=lambda r: r[1])
        ids, angles, var = zip(*rows) if rows else ((), (), ())
        return cls(np.array(angles), np.array(var), np.array(ids))


def ideal_beam_table(config: SensorConfig) -> BeamTable:
    """Angles evenly spaced from the vertical minimum to maximum, inclusive."""
    if config.channels == 1:
        angles = np.array([config.vertical_min_deg])
    else:
        angles = np.linspace(config.vertical_min_deg, config.vertical_max_deg, config.channels)
    return BeamTable(angles, np.full(config.channels, config.vertical_noise_deg ** 2))


def perturbed_beam_table(config: SensorConfig, seed: int | None = None) -> BeamTable:
    """Ideal table with one Gaussian offset per beam, re-sorted by angle."""
    ideal = ideal_beam_table(config)
    rng = np.random.default_rng(config.sensor_seed if seed is None else seed)
    offsets = rng.normal(0.0, config.beam_offset_sigma_deg, len(ideal))
    return BeamTable(np.sort(ideal.angles_deg + offsets), ideal.variances_deg2)


@dataclass(frozen=True)
class EnergyModel:
    emit_energy: float = 1.0
    air_attenuation: float = 0.004
    threshold: float = 0.0
    convention: str = LITERAL

    def __post_init__(self):
        if self.air_attenuation < 0:
            raise ValueError("air attenuation must be >= 0")

    @classmethod
    def from_config(cls, config: SensorConfig) -> EnergyModel:
        return cls(config.emit_energy, config.air_attenuation, config.threshold,
                   config.incidence_convention)


def return_energy(model: EnergyModel, reflectivity, incidence, distance):
    """Returned pulse energy: emitted energy x reflectivity x incidence factor x attenuation.

    The incidence factor is ``sqrt(1 - cos(incidence))`` under the literal
    convention and ``sqrt(cos(incidence))`` under the cosine convention;
    attenuation is ``exp(-air_attenuation * distance)``.
    """
    cos_i = np.cos(incidence)
    if model.convention == LITERAL:
        r_ia = np.sqrt(np.maximum(1.0 - cos_i, 0.0))
    else:
        r_ia = np.sqrt(np.maximum(cos_i, 0.0))
    energy = model.emit_energy * np.asarray(reflectivity, dtype=float) * r_ia * np.exp(
        -model.air_attenuation * np.asarray(distance, dtype=float))
    return float(energy) if np.ndim(energy) == 0 else energy


def elevation_deg(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    norm = np.linalg.norm(pts, axis=1)
    return np.degrees(np.arcsin(np.clip(pts[:, 2] / norm, -1.0, 1.0)))


def fit_beam_cone(points, min_points: int = 10) -> tuple[float, float]:
    """Fit a vertical-axis cone with apex at the sensor origin to one beam's points.

    Returns the beam elevation (degrees) and the variance of the points'
    angular deviation from the cone surface (degrees squared).
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) < min_points:
        raise TooFewPoints(f"need at least {min_points} points, got {len(pts)}")
    if np.any(np.linalg.norm(pts, axis=1) == 0):
        raise ValueError("beam points must not sit at the cone apex")
    elev = elevation_deg(pts)
    return float(elev.mean()), float(elev.var(ddof=1))


def calibrate(points, beam_ids, min_points: int = 10) -> BeamTable:
    """Fit every beam in a labeled point set; rows sorted by fitted angle."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    beam_ids = np.asarray(beam_ids).reshape(-1)
    fits = []
    for beam in np.unique(beam_ids):
        angle, var = fit_beam_cone(pts[beam_ids == beam], min_points)
        fits.append((angle, var, int(beam)))
    fits.sort()
    angles, var, ids = (np.array(col) for col in zip(*fits))
    return BeamTable(angles, var, ids)


@dataclass(frozen=True, eq=False)
class BeamBatch:
    beam: np.ndarray
    azimuth_index: np.ndarray
    directions: np.ndarray

    def __len__(self):
        return len(self.beam)


def generate_beam_directions(table: BeamTable, config: SensorConfig, rng_seed) -> BeamBatch:
    """Unit beam directions in the sensor frame, azimuth-major.

    Azimuth step ``a`` points at ``-hfov/2 + a * step`` degrees; each sample
    gets Gaussian elevation noise from its beam's variance and Gaussian
    azimuth noise from the config.
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    steps = config.azimuth_steps
    channels = len(table)
    beam = np.tile(np.arange(channels), steps)
    az_idx = np.repeat(np.arange(steps), channels)
    elev = table.angles_deg[beam] + rng.standard_normal(len(beam)) * table.sigmas_deg[beam]
    azim = (-config.horizontal_fov_deg / 2.0 + az_idx * config.azimuth_step_deg
            + rng.standard_normal(len(beam)) * config.azimuth_noise_deg)
    el, az = np.radians(elev), np.radians(azim)
    cos_el = np.cos(el)
    dirs = np.stack([cos_el * np.cos(az), cos_el * np.sin(az), np.sin(el)], axis=1)
    return BeamBatch(beam, az_idx, dirs)


@dataclass(frozen=True, eq=False)
class SensorModel:
    config: SensorConfig = field(default_factory=SensorConfig)
    table: BeamTable | None = None

    def __post_init__(self):
        table = self.table
        if table is None:
            if self.config.beam_table is not None:
                table = BeamTable.read_csv(self.config.beam_table)
            elif self.config.beam_offset_sigma_deg > 0:
                table = perturbed_beam_table(self.config)
            else:
                table = ideal_beam_table(self.config)
        object.__setattr__(self, "table", table)

    @property
    def energy(self) -> EnergyModel:
        return EnergyModel.from_config(self.config)

    def directions(self, rng_seed) -> BeamBatch:
        return generate_beam_directions(self.table, self.config, rng_seed)
