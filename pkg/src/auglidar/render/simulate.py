"""Turn rendered cube maps into a LiDAR frame."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry import RigidPose
from ..sensor import SensorModel, return_energy
from .cubemap import DEFAULT_RESOLUTION, SceneGeometry, SplatParams, render_cube_maps


@dataclass(eq=False)
class SimulatedPoints:
    """Struct-of-arrays point list in the sensor frame.

    Positions and energies are float32, IDs uint32 (instance 0 is
    background). ``label`` is the class ID of the surface hit.
    """

    positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.float32))
    beam: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.uint32))
    instance: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.uint32))
    label: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.uint32))
    material: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.uint32))
    energy: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.float32))

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float32).reshape(-1, 3)
        for name in ("beam", "instance", "label", "material"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.uint32).reshape(-1))
        self.energy = np.asarray(self.energy, dtype=np.float32).reshape(-1)
        n = len(self.positions)
        if any(len(getattr(self, k)) != n
               for k in ("beam", "instance", "label", "material", "energy")):
            raise ValueError("point attribute arrays differ in length")

    def __len__(self):
        return len(self.positions)

    def subset(self, mask) -> SimulatedPoints:
        return SimulatedPoints(self.positions[mask], self.beam[mask], self.instance[mask],
                               self.label[mask], self.material[mask], self.energy[mask])

    def equals(self, other: SimulatedPoints) -> bool:
        return all(np.array_equal(getattr(self, k), getattr(other, k))
                   for k in ("positions", "beam", "instance", "label", "material", "energy"))


@dataclass
class FrameAccounting:
    """Where every candidate beam went."""

    candidates: int = 0
    sky: int = 0
    out_of_range: int = 0
    below_threshold: int = 0
    emitted: int = 0

    def as_dict(self) -> dict[str, int]:
        return dict(self.__dict__)


def _rngs(rng_seed, count):
    seq = rng_seed if isinstance(rng_seed, np.random.SeedSequence) else np.random.SeedSequence(
        rng_seed)
    return [np.random.default_rng(s) for s in seq.spawn(count)]


def simulate_geometry(scene: SceneGeometry, sensor: SensorModel, sensor_pose: RigidPose,
                      rng_seed, splat: SplatParams | None = None,
                      resolution: int = DEFAULT_RESOLUTION, backend: str | None = None,
                      maps=None) -> tuple[SimulatedPoints, FrameAccounting]:
    """Render ``scene`` around ``sensor_pose`` and fire every beam into it.

    Beams that see sky are dropped; so are returns beyond max range and
    returns whose energy falls below the threshold. Range noise is added
    after the lookup along the (noisy) beam direction.
    """
    cfg = sensor.config
    beam_rng, noise_rng = _rngs(rng_seed, 2)
    if maps is None:
        maps = render_cube_maps(scene, sensor_pose, splat, resolution, cfg.max_range, backend)
    beams = sensor.directions(beam_rng)
    hits = maps.lookup(beams.directions)
    acct = FrameAccounting(candidates=len(beams))
    acct.sky = int((~hits.hit).sum())
    idx = np.nonzero(hits.hit)[0]
    d = beams.directions[idx]
    rng = hits.range[idx] + noise_rng.standard_normal(len(idx)) * cfg.distance_noise
    in_range = (rng > 0) & (rng <= cfg.max_range)
    acct.out_of_range = int((~in_range).sum())
    idx, d, rng = idx[in_range], d[in_range], rng[in_range]
    cos_i = np.clip(np.abs(np.sum(d * hits.normal[idx], axis=1)), 0.0, 1.0)
    reflect = np.array([m.reflectivity for m in scene.materials])[hits.material[idx]]
    energy = return_energy(sensor.energy, reflect, np.arccos(cos_i), rng)
    energy = np.atleast_1d(energy)
    strong = ~(energy < sensor.energy.threshold)
    acct.below_threshold = int((~strong).sum())
    idx, d, rng, energy = idx[strong], d[strong], rng[strong], energy[strong]
    acct.emitted = len(idx)
    points = SimulatedPoints(
        d * rng[:, None],
        beams.beam[idx],
        hits.instance[idx],
        np.maximum(hits.label[idx], 0),
        np.maximum(hits.material[idx], 0),
        energy,
    )
    return points, acct


def obstacle_class_ids(classes, categories) -> dict[str, int]:
    """Class ID per obstacle category; categories missing from the table map to unknown."""
    return {c: (classes.id(c) if c in classes else 0) for c in categories}


def simulate_frame(placement, background, library, sensor: SensorModel, rng_seed,
                   sensor_pose: RigidPose | None = None, splat: SplatParams | None = None,
                   resolution: int = DEFAULT_RESOLUTION, backend: str | None = None,
                   ) -> tuple[SimulatedPoints, FrameAccounting]:
    """Simulate one frame of ``placement`` over ``background``.

    The sensor sits at ``sensor_pose`` (default: the placement's scanner
    pose); returned positions are in the sensor frame.
    """
    pose = sensor_pose or placement.scanner_pose
    classes = background.cloud.classes
    ids = obstacle_class_ids(classes, {o.category for o in placement.obstacles})
    scene = SceneGeometry.build(background, placement.obstacle_meshes(library, ids))
    return simulate_geometry(scene, sensor, pose, rng_seed, splat, resolution, backend)
