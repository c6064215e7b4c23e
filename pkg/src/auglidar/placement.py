"""Obstacle pose distributions, model choice and collision-free scene composition."""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .background import BackgroundScene, GroundModel
from .geometry import Material, Obb, RigidPose, TriangleMesh, footprints_overlap, wrap_angle
from .io import _atomic_write, read_obj

LOGGER = logging.getLogger(__name__)

MAP_MAGIC = b"AUGLPMAP"
MAP_VERSION = 1
DEFAULT_MAP_CELL = 0.5
DEFAULT_TEMPLATE_K = 2
DEFAULT_YAW_SIGMA_DEG = 5.0
DEFAULT_MIXING_RATIO = 0.9
DEFAULT_CLEARANCE = 0.3
ATTEMPTS_PER_TARGET = 100
# obstacles must not intersect background structure taller than this above ground
_STRUCTURE_HEIGHT = 0.3
TRANSPARENT_PREFIXES = ("glass", "transparent")


class AnnotationOutOfBounds(ValueError):
    def __init__(self, index: int, position):
        super().__init__(f"annotation {index} at {tuple(np.round(position, 3))} lies outside the map bounds")
        self.index = index


class NoAnnotations(ValueError):
    pass


class NoPlacementMass(ValueError):
    pass


class UnknownCategory(KeyError):
    pass


class PlacementExhausted(RuntimeError):
    """Raised when the attempt budget runs out before all targets are placed."""

    def __init__(self, achieved: dict[str, int], targets: dict[str, int],
                 placement: ScenePlacement):
        short = {c: f"{achieved.get(c, 0)}/{n}" for c, n in sorted(targets.items())}
        super().__init__(f"placement exhausted: placed {short}")
        self.achieved = achieved
        self.targets = targets
        self.placement = placement


@dataclass(frozen=True, eq=False)
class GaussianTemplate:
    """``(2k+1) x (2k+1)`` weights, 1.0 at the center."""

    k: int = DEFAULT_TEMPLATE_K
    sigma: float | None = None
    weights: np.ndarray | None = None

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("template half-width must be >= 0")
        if self.weights is None:
            sigma = self.k / 2.0 if self.sigma is None else self.sigma
            if self.k > 0 and not sigma > 0:
                raise ValueError("template sigma must be positive")
            d = np.arange(-self.k, self.k + 1, dtype=float)
            r2 = d[:, None] ** 2 + d[None, :] ** 2
            w = np.exp(-r2 / (2.0 * sigma * sigma)) if self.k > 0 else np.ones((1, 1))
        else:
            w = np.array(self.weights, dtype=float)
            if w.shape != (2 * self.k + 1, 2 * self.k + 1):
                raise ValueError(f"template weights must be {2 * self.k + 1} square")
            if np.any(w < 0) or not np.all(np.isfinite(w)):
                raise ValueError("template weights must be finite and non-negative")
            w = w / w[self.k, self.k]
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_weights(cls, weights) -> GaussianTemplate:
        w = np.asarray(weights, dtype=float)
        return cls(k=(w.shape[0] - 1) // 2, weights=w)


@dataclass(eq=False)
class ProbabilityMap:
    """Weight grid ``W[i, j]`` and per-cell heading vector sums for one category.

    Cell ``(i, j)`` spans ``origin + (i, j) * cell_size`` to one cell further;
    ``i`` runs along x, ``j`` along y.
    """

    origin: tuple[float, float]
    cell_size: float
    weights: np.ndarray
    directions: np.ndarray
    category: str = ""

    def __post_init__(self):
        self.origin = (float(self.origin[0]), float(self.origin[1]))
        self.weights = np.array(self.weights, dtype=float)
        self.directions = np.array(self.directions, dtype=float)
        if self.weights.ndim != 2 or self.directions.shape != self.weights.shape + (2,):
            raise ValueError("weights must be (M, N) and directions (M, N, 2)")
        if not self.cell_size > 0:
            raise ValueError("cell size must be positive")
        if np.any(self.weights < 0):
            raise ValueError("map weights must be non-negative")

    @classmethod
    def empty(cls, bounds, cell_size: float, category: str = "") -> ProbabilityMap:
        xmin, ymin, xmax, ymax = bounds
        if not (xmax > xmin and ymax > ymin):
            raise ValueError(f"degenerate map bounds {bounds}")
        m = max(1, math.ceil((xmax - xmin) / cell_size - 1e-9))
        n = max(1, math.ceil((ymax - ymin) / cell_size - 1e-9))
        return cls((xmin, ymin), cell_size, np.zeros((m, n)), np.zeros((m, n, 2)), category)

    @property
    def shape(self) -> tuple[int, int]:
        return self.weights.shape

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        m, n = self.shape
        x0, y0 = self.origin
        return (x0, y0, x0 + m * self.cell_size, y0 + n * self.cell_size)

    def cell_of(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        i = np.floor((np.asarray(x, dtype=float) - self.origin[0]) / self.cell_size)
        j = np.floor((np.asarray(y, dtype=float) - self.origin[1]) / self.cell_size)
        return i.astype(np.int64), j.astype(np.int64)

    def cell_center(self, i, j) -> tuple[np.ndarray, np.ndarray]:
        return (self.origin[0] + (np.asarray(i) + 0.5) * self.cell_size,
                self.origin[1] + (np.asarray(j) + 0.5) * self.cell_size)

    def resolved_direction(self) -> np.ndarray:
        """Per-cell heading in radians; 0 where nothing accumulated."""
        return np.arctan2(self.directions[..., 1], self.directions[..., 0])

    def _check_compatible(self, other: ProbabilityMap):
        if (self.origin != other.origin or self.cell_size != other.cell_size
                or self.shape != other.shape):
            raise ValueError("maps differ in grid layout")

    def __add__(self, other: ProbabilityMap) -> ProbabilityMap:
        self._check_compatible(other)
        return ProbabilityMap(self.origin, self.cell_size, self.weights + other.weights,
                              self.directions + other.directions, self.category or other.category)

    def save(self, path) -> None:
        m, n = self.shape
        cat = self.category.encode("utf-8")
        head = MAP_MAGIC + struct.pack("<II", MAP_VERSION, 0)
        meta = struct.pack("<dddIII", self.origin[0], self.origin[1], self.cell_size, m, n,
                           len(cat)) + cat
        payload = self.weights.astype("<f8").tobytes() + self.directions.astype("<f8").tobytes()
        _atomic_write(Path(path), head + meta + payload)

    @classmethod
    def load(cls, path) -> ProbabilityMap:
        data = Path(path).read_bytes()
        if len(data) < 16 or data[:8] != MAP_MAGIC:
            raise ValueError(f"{path}: not a probability map file")
        version, _ = struct.unpack_from("<II", data, 8)
        if version != MAP_VERSION:
            raise ValueError(f"{path}: unsupported map version {version}")
        fmt = "<dddIII"
        x0, y0, cell, m, n, clen = struct.unpack_from(fmt, data, 16)
        pos = 16 + struct.calcsize(fmt)
        category = data[pos:pos + clen].decode("utf-8")
        pos += clen
        need = pos + 8 * m * n * 3
        if len(data) != need:
            raise ValueError(f"{path}: map payload is {len(data) - pos} bytes, expected {need - pos}")
        w = np.frombuffer(data, "<f8", m * n, pos).reshape(m, n)
        d = np.frombuffer(data, "<f8", m * n * 2, pos + 8 * m * n).reshape(m, n, 2)
        return cls((x0, y0), cell, w.copy(), d.copy(), category)


@dataclass(frozen=True)
class Annotation:
    category: str
    pose: RigidPose


def read_annotations(path) -> list[Annotation]:
    """Parse ``category x y z yaw`` lines (yaw in radians, ``#`` comments)."""
    out = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        toks = line.split()
        if len(toks) != 5:
            raise ValueError(f"{path}:{lineno}: expected 'category x y z yaw', got {raw!r}")
        try:
            x, y, z, yaw = (float(t) for t in toks[1:])
        except ValueError:
            raise ValueError(f"{path}:{lineno}: non-numeric field in {raw!r}") from None
        out.append(Annotation(toks[0], RigidPose.from_yaw(yaw, (x, y, z))))
    return out


def write_annotations(annotations, path) -> None:
    lines = ["# category x y z yaw(rad)"]
    for a in annotations:
        x, y, z = a.pose.translation
        lines.append(f"{a.category} {x:.9g} {y:.9g} {z:.9g} {a.pose.yaw:.9g}")
    _atomic_write(Path(path), ("\n".join(lines) + "\n").encode())


def _as_annotation(item) -> Annotation:
    if isinstance(item, Annotation):
        return item
    category, pose = item
    return Annotation(category, pose)


def build_probability_map(annotations, bounds, cell_size: float = DEFAULT_MAP_CELL,
                          template: GaussianTemplate | None = None,
                          categories=()) -> dict[str, ProbabilityMap]:
    """Splat the template onto each annotated obstacle's cell, per category.

    Weights receive the template; heading sums receive the template weight
    times the unit vector of the obstacle yaw. Template cells falling off
    the grid are clipped. ``categories`` forces (possibly empty) maps for
    categories without annotations.
    """
    template = template or GaussianTemplate()
    anns = [_as_annotation(a) for a in annotations]
    maps = {c: ProbabilityMap.empty(bounds, cell_size, c) for c in categories}
    xmin, ymin, xmax, ymax = bounds
    k = template.k
    tw = template.weights
    for idx, ann in enumerate(anns):
        x, y = ann.pose.translation[:2]
        if not (xmin <= x <= xmax and ymin <= y <= ymax):
            raise AnnotationOutOfBounds(idx, ann.pose.translation)
        pmap = maps.get(ann.category)
        if pmap is None:
            pmap = maps[ann.category] = ProbabilityMap.empty(bounds, cell_size, ann.category)
        m, n = pmap.shape
        i, j = (int(v) for v in pmap.cell_of(x, y))
        i, j = min(i, m - 1), min(j, n - 1)
        i0, i1 = max(i - k, 0), min(i + k, m - 1)
        j0, j1 = max(j - k, 0), min(j + k, n - 1)
        w = tw[i0 - i + k:i1 - i + k + 1, j0 - j + k:j1 - j + k + 1]
        yaw = ann.pose.yaw
        pmap.weights[i0:i1 + 1, j0:j1 + 1] += w
        pmap.directions[i0:i1 + 1, j0:j1 + 1, 0] += w * math.cos(yaw)
        pmap.directions[i0:i1 + 1, j0:j1 + 1, 1] += w * math.sin(yaw)
    return maps


class PoseSampler:
    """Weighted cell sampler for one map restricted to a disk around the scanner.

    With a ground model, cells whose center has no ground height carry no
    mass, and sampled z is the ground height at the jittered position.
    """

    def __init__(self, pmap: ProbabilityMap, scanner_pose: RigidPose | None = None,
                 max_range: float = 120.0, ground: GroundModel | None = None,
                 yaw_sigma_deg: float = DEFAULT_YAW_SIGMA_DEG):
        self.map = pmap
        self.ground = ground
        self.yaw_sigma = math.radians(yaw_sigma_deg)
        m, n = pmap.shape
        ii, jj = np.meshgrid(np.arange(m), np.arange(n), indexing="ij")
        cx, cy = pmap.cell_center(ii, jj)
        w = pmap.weights.copy()
        if scanner_pose is not None:
            sx, sy = scanner_pose.translation[:2]
            w[(cx - sx) ** 2 + (cy - sy) ** 2 > max_range * max_range] = 0.0
        if ground is not None:
            self._center_z = ground.heights_at(cx, cy)
            w[~np.isfinite(self._center_z)] = 0.0
        flat = w.reshape(-1)
        self.cells = np.nonzero(flat > 0)[0]
        total = flat[self.cells].sum()
        if len(self.cells) == 0 or not total > 0:
            raise NoPlacementMass(f"map {pmap.category!r} has no weight within {max_range} m "
                                  "of the scanner")
        self.cdf = np.cumsum(flat[self.cells]) / total
        self.cdf[-1] = 1.0
        self.heading = pmap.resolved_direction().reshape(-1)

    def sample(self, count: int, rng: np.random.Generator) -> list[RigidPose]:
        pos, yaw = self.sample_arrays(count, rng)
        return [RigidPose.from_yaw(float(a), p) for p, a in zip(pos, yaw)]

    def sample_arrays(self, count: int, rng: np.random.Generator):
        pmap = self.map
        pick = self.cells[np.searchsorted(self.cdf, rng.random(count), side="right")]
        i, j = np.divmod(pick, pmap.shape[1])
        jitter = rng.random((count, 2))
        x = pmap.origin[0] + (i + jitter[:, 0]) * pmap.cell_size
        y = pmap.origin[1] + (j + jitter[:, 1]) * pmap.cell_size
        yaw = wrap_angle(self.heading[pick] + rng.standard_normal(count) * self.yaw_sigma)
        if self.ground is not None:
            z = self.ground.heights_at(x, y)
            z = np.where(np.isfinite(z), z, self._center_z.reshape(-1)[pick])
        else:
            z = np.zeros(count)
        return np.stack([x, y, z], axis=1), np.atleast_1d(yaw)


def _rng(rng_seed) -> np.random.Generator:
    return rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)


def sample_poses(pmap: ProbabilityMap, scanner_pose: RigidPose | None, count: int, rng_seed,
                 ground: GroundModel | None = None, max_range: float = 120.0,
                 yaw_sigma_deg: float = DEFAULT_YAW_SIGMA_DEG) -> list[RigidPose]:
    """Draw ``count`` obstacle poses with cell probability proportional to weight."""
    sampler = PoseSampler(pmap, scanner_pose, max_range, ground, yaw_sigma_deg)
    return sampler.sample(count, _rng(rng_seed))


@dataclass(frozen=True, eq=False)
class ObstacleModel:
    """A CAD model in its own frame: base on z = 0, facing +x."""

    model_id: str
    category: str
    mesh: TriangleMesh
    materials: tuple[Material, ...]
    group: str = "high"
    canonical: Obb | None = None

    def __post_init__(self):
        if self.group not in ("high", "low"):
            raise ValueError(f"model {self.model_id}: group must be 'high' or 'low'")
        if len(self.mesh) == 0:
            raise ValueError(f"model {self.model_id}: mesh has no triangles")
        if len(self.mesh.materials) and self.mesh.materials.max() >= len(self.materials):
            raise ValueError(f"model {self.model_id}: material ID without a material")
        if self.canonical is None:
            object.__setattr__(self, "canonical", Obb.from_points(self.mesh.vertices))
        elif not self.canonical.contains(self.mesh.vertices, atol=1e-6).all():
            raise ValueError(f"model {self.model_id}: canonical box does not contain the mesh")

    def world_obb(self, pose: RigidPose) -> Obb:
        return self.canonical.transformed(pose)


def _material_for(name: str, reflectivity: float) -> Material:
    if name.lower().startswith(TRANSPARENT_PREFIXES):
        return Material(0.0, True, name)
    return Material(reflectivity, False, name)


@dataclass(eq=False)
class ObstacleLibrary:
    models: dict[str, ObstacleModel] = field(default_factory=dict)

    def __post_init__(self):
        self.models = dict(sorted(self.models.items()))

    def __getitem__(self, model_id: str) -> ObstacleModel:
        return self.models[model_id]

    def __contains__(self, model_id):
        return model_id in self.models

    def __len__(self):
        return len(self.models)

    @property
    def categories(self) -> list[str]:
        return sorted({m.category for m in self.models.values()})

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for m in self.models.values():
            out[m.category] = out.get(m.category, 0) + 1
        return dict(sorted(out.items()))

    def ids_for(self, category: str, group: str | None = None) -> list[str]:
        return [k for k, m in self.models.items()
                if m.category == category and (group is None or m.group == group)]

    @classmethod
    def load(cls, manifest) -> ObstacleLibrary:
        """Read a CSV manifest with columns id, category, mesh, group, reflectivity.

        Mesh paths are relative to the manifest. Material groups named
        ``glass*`` or ``transparent*`` become transparent.
        """
        manifest = Path(manifest)
        models = {}
        with open(manifest, newline="") as fh:
            reader = csv.DictReader(fh)
            need = {"id", "category", "mesh", "group", "reflectivity"}
            if reader.fieldnames is None or not need <= set(reader.fieldnames):
                raise ValueError(f"{manifest}: manifest needs columns {sorted(need)}")
            for row in reader:
                mid = row["id"].strip()
                if mid in models:
                    raise ValueError(f"{manifest}: duplicate model id {mid!r}")
                mesh_path = Path(row["mesh"].strip())
                if not mesh_path.is_absolute():
                    mesh_path = manifest.parent / mesh_path
                mesh, names = read_obj(mesh_path)
                refl = float(row["reflectivity"])
                mats = tuple(_material_for(n, refl) for n in names) or (Material(refl),)
                models[mid] = ObstacleModel(mid, row["category"].strip(), mesh, mats,
                                            row["group"].strip().lower())
        return cls(models)


@dataclass(frozen=True)
class CategoryPrior:
    """Category occurrence frequencies and high/low-frequency model groups."""

    frequencies: dict[str, float]
    groups: dict[str, tuple[tuple[str, ...], tuple[str, ...]]]
    mixing_ratio: float = DEFAULT_MIXING_RATIO

    def __post_init__(self):
        total = sum(self.frequencies.values())
        if self.frequencies and abs(total - 1.0) > 1e-9:
            raise ValueError(f"category frequencies sum to {total}, not 1")
        if any(p < 0 for p in self.frequencies.values()):
            raise ValueError("category frequencies must be non-negative")
        if not 0.0 <= self.mixing_ratio <= 1.0:
            raise ValueError("mixing ratio must lie in [0, 1]")
        for cat, (high, low) in self.groups.items():
            if set(high) & set(low):
                raise ValueError(f"category {cat!r}: model groups overlap")
            if not high and not low:
                raise ValueError(f"category {cat!r}: no models")

    @classmethod
    def from_library(cls, library: ObstacleLibrary, counts: dict[str, float] | None = None,
                     mixing_ratio: float = DEFAULT_MIXING_RATIO) -> CategoryPrior:
        """Frequencies from ``counts`` (e.g. annotation tallies) or uniform over categories."""
        cats = library.categories
        raw = {c: float((counts or {}).get(c, 0.0 if counts else 1.0)) for c in cats}
        total = sum(raw.values())
        freqs = {c: v / total for c, v in raw.items()} if total > 0 else {}
        groups = {c: (tuple(library.ids_for(c, "high")), tuple(library.ids_for(c, "low")))
                  for c in cats}
        return cls(freqs, groups, mixing_ratio)

    @classmethod
    def from_annotations(cls, annotations, library: ObstacleLibrary,
                         mixing_ratio: float = DEFAULT_MIXING_RATIO) -> CategoryPrior:
        counts: dict[str, float] = {}
        for a in annotations:
            a = _as_annotation(a)
            counts[a.category] = counts.get(a.category, 0.0) + 1.0
        return cls.from_library(library, counts, mixing_ratio)


def select_model(prior: CategoryPrior, library: ObstacleLibrary, category: str, rng_seed) -> str:
    """High-frequency group with probability ``mixing_ratio``, else low; uniform within."""
    if category not in prior.groups or category not in library.categories:
        raise UnknownCategory(category)
    rng = _rng(rng_seed)
    high, low = prior.groups[category]
    use_high = rng.random() < prior.mixing_ratio
    group = high if (use_high and high) or not low else low
    return group[int(rng.integers(len(group)))]


@dataclass(frozen=True)
class PlacedObstacle:
    instance_id: int
    model_id: str
    category: str
    pose: RigidPose


@dataclass(eq=False)
class ScenePlacement:
    scanner_pose: RigidPose
    obstacles: list[PlacedObstacle] = field(default_factory=list)

    def __len__(self):
        return len(self.obstacles)

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for o in self.obstacles:
            out[o.category] = out.get(o.category, 0) + 1
        return dict(sorted(out.items()))

    def world_obbs(self, library: ObstacleLibrary) -> list[Obb]:
        return [library[o.model_id].world_obb(o.pose) for o in self.obstacles]

    def obstacle_meshes(self, library: ObstacleLibrary, class_ids: dict[str, int]):
        """``(instance_id, world_mesh, class_id, materials)`` for scene building."""
        out = []
        for o in self.obstacles:
            model = library[o.model_id]
            out.append((o.instance_id, model.mesh.transformed(o.pose),
                        class_ids.get(o.category, 0), list(model.materials)))
        return out


def _footprint_on_ground(obb: Obb, ground: GroundModel) -> bool:
    fp = obb.footprint()
    pts = np.vstack([fp, obb.center[:2], (fp + obb.center[:2]) / 2.0])
    return bool(np.all(np.isfinite(ground.heights_at(pts[:, 0], pts[:, 1]))))


class _StructureIndex:
    """2D KD-tree over background points standing clear of the ground."""

    def __init__(self, background: BackgroundScene):
        pts = background.cloud.points
        floor = background.ground.heights_at(pts[:, 0], pts[:, 1])
        tall = np.isfinite(floor) & (pts[:, 2] > floor + _STRUCTURE_HEIGHT)
        self.points = pts[tall | ~np.isfinite(floor)]
        self.tree = cKDTree(self.points[:, :2]) if len(self.points) else None

    def hits(self, obb: Obb) -> bool:
        if self.tree is None:
            return False
        idx = self.tree.query_ball_point(obb.center[:2], float(np.hypot(*obb.half_extents[:2])))
        return bool(len(idx) and obb.contains(self.points[np.asarray(idx)]).any())


def compose_scene(background: BackgroundScene, maps: dict[str, ProbabilityMap],
                  prior: CategoryPrior, library: ObstacleLibrary, targets: dict[str, int],
                  rng_seed, scanner_pose: RigidPose | None = None, max_range: float = 120.0,
                  clearance: float = DEFAULT_CLEARANCE,
                  max_attempts: int | None = None,
                  yaw_sigma_deg: float = DEFAULT_YAW_SIGMA_DEG) -> ScenePlacement:
    """Rejection-sample obstacles until every category reaches its target.

    A candidate is rejected when its ground footprint, inflated by
    ``clearance``, overlaps an accepted obstacle or the scanner, leaves
    valid ground, or intersects background structure. Categories are
    filled in sorted order, each with an attempt budget of
    ``ATTEMPTS_PER_TARGET x target`` unless ``max_attempts`` is given.
    """
    rng = _rng(rng_seed)
    scanner_pose = scanner_pose or RigidPose.identity()
    targets = {c: int(n) for c, n in sorted(targets.items()) if int(n) > 0}
    for cat in targets:
        if cat not in maps:
            raise UnknownCategory(f"no probability map for category {cat!r}")
        if cat not in library.categories:
            raise UnknownCategory(cat)
    placement = ScenePlacement(scanner_pose)
    accepted: list[Obb] = []
    structure = _StructureIndex(background)
    scanner_box = Obb(scanner_pose.translation, (0.25, 0.25, 0.25))
    attempts = 0
    achieved = {c: 0 for c in targets}
    for cat, want in targets.items():
        budget = max_attempts if max_attempts is not None else ATTEMPTS_PER_TARGET * want
        tried = 0
        sampler = PoseSampler(maps[cat], scanner_pose, max_range, background.ground, yaw_sigma_deg)
        while achieved[cat] < want and tried < budget:
            tried += 1
            attempts += 1
            pose = sampler.sample(1, rng)[0]
            model_id = select_model(prior, library, cat, rng)
            obb = library[model_id].world_obb(pose)
            if footprints_overlap(obb, scanner_box, clearance):
                continue
            if any(footprints_overlap(obb, other, clearance) for other in accepted):
                continue
            if not _footprint_on_ground(obb, background.ground):
                continue
            if structure.hits(obb):
                continue
            accepted.append(obb)
            placement.obstacles.append(
                PlacedObstacle(len(placement.obstacles) + 1, model_id, cat, pose))
            achieved[cat] += 1
    if any(achieved[c] < n for c, n in targets.items()):
        raise PlacementExhausted(achieved, targets, placement)
    LOGGER.debug("placed %d obstacles in %d attempts", len(placement), attempts)
    return placement
