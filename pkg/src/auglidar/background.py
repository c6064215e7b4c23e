"""Clean scanned backgrounds: drop movable obstacles, model and patch the ground."""

from __future__ import annotations

import json
import logging
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .cloud import GROUND, MOVABLE_CLASSES, SemanticPointCloud
from .geometry import Material
from .io import _atomic_write, read_point_cloud, write_point_cloud
from .spatial import SpatialGridIndex

LOGGER = logging.getLogger(__name__)

GRID_MAGIC = b"AUGLGRND"
GRID_VERSION = 1
DEFAULT_GROUND_CELL = 0.5
DEFAULT_FILL_SPACING = 0.03
GROUND_PERCENTILE = 5.0


class NoGroundPoints(ValueError):
    pass


class HoleUnfillable(UserWarning):
    """A hole with no valid ground around it; it is left open."""


@dataclass(frozen=True, eq=False)
class GroundModel:
    """Ground heights on a grid aligned to world multiples of ``cell_size``.

    Cell ``(i, j)`` spans ``[(i0 + i) * cell, (i0 + i + 1) * cell)`` in x and
    likewise in y. Invalid cells hold NaN.
    """

    cell_size: float
    i0: int
    j0: int
    heights: np.ndarray

    def __post_init__(self):
        h = np.array(self.heights, dtype=float)
        h.setflags(write=False)
        object.__setattr__(self, "heights", h)

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.heights)

    @property
    def shape(self) -> tuple[int, int]:
        return self.heights.shape

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        c = self.cell_size
        nx, ny = self.shape
        return (self.i0 * c, self.j0 * c, (self.i0 + nx) * c, (self.j0 + ny) * c)

    def cell_of(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        i = np.floor(np.asarray(x, dtype=float) / self.cell_size).astype(np.int64) - self.i0
        j = np.floor(np.asarray(y, dtype=float) / self.cell_size).astype(np.int64) - self.j0
        return i, j

    def cell_center(self, i, j) -> tuple[np.ndarray, np.ndarray]:
        c = self.cell_size
        return (np.asarray(i) + self.i0 + 0.5) * c, (np.asarray(j) + self.j0 + 0.5) * c

    def heights_at(self, x, y) -> np.ndarray:
        """Vectorized :func:`ground_height`; NaN where absent."""
        return _bilinear(self.heights, self.cell_size, self.i0, self.j0, x, y)

    def save(self, path) -> None:
        nx, ny = self.shape
        header = GRID_MAGIC + struct.pack("<II", GRID_VERSION, 0)
        meta = struct.pack("<qqIId", self.i0, self.j0, nx, ny, self.cell_size)
        payload = self.heights.astype("<f8").tobytes()
        _atomic_write(Path(path), header + meta + payload)

    @classmethod
    def load(cls, path) -> GroundModel:
        data = Path(path).read_bytes()
        if len(data) < 16 or data[:8] != GRID_MAGIC:
            raise ValueError(f"{path}: not a ground grid file")
        (version, _) = struct.unpack_from("<II", data, 8)
        if version != GRID_VERSION:
            raise ValueError(f"{path}: unsupported ground grid version {version}")
        i0, j0, nx, ny, cell = struct.unpack_from("<qqIId", data, 16)
        start = 16 + struct.calcsize("<qqIId")
        need = start + 8 * nx * ny
        if len(data) < need:
            raise ValueError(f"{path}: truncated ground grid (byte offset {len(data)})")
        heights = np.frombuffer(data, dtype="<f8", count=nx * ny, offset=start).reshape(nx, ny)
        return cls(cell, i0, j0, heights.copy())


def _bilinear(heights, cell, i0, j0, x, y) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    nx, ny = heights.shape
    gx = x / cell - i0 - 0.5
    gy = y / cell - j0 - 0.5
    inside = (gx >= -0.5) & (gx < nx - 0.5) & (gy >= -0.5) & (gy < ny - 0.5)
    ia = np.floor(gx).astype(np.int64)
    ja = np.floor(gy).astype(np.int64)
    fx = gx - ia
    fy = gy - ja
    total = np.zeros(np.broadcast(x, y).shape)
    acc = np.zeros_like(total)
    for di, wx in ((0, 1.0 - fx), (1, fx)):
        for dj, wy in ((0, 1.0 - fy), (1, fy)):
            ii = np.clip(ia + di, 0, nx - 1)
            jj = np.clip(ja + dj, 0, ny - 1)
            h = heights[ii, jj]
            w = wx * wy
            ok = np.isfinite(h) & (w > 0)
            acc += np.where(ok, w * np.where(ok, h, 0.0), 0.0)
            total += np.where(ok, w, 0.0)
    out = np.where(inside & (total > 0), acc / np.where(total > 0, total, 1.0), np.nan)
    return out


def ground_height(model: GroundModel, x: float, y: float) -> float | None:
    """Bilinear ground height at ``(x, y)``, or None outside valid coverage."""
    h = float(model.heights_at(x, y))
    return None if math.isnan(h) else h


def _grid_extent(points_xy: np.ndarray, cell: float) -> tuple[int, int, int, int]:
    lo = np.floor(points_xy.min(axis=0) / cell).astype(np.int64)
    hi = np.floor(points_xy.max(axis=0) / cell).astype(np.int64)
    return int(lo[0]), int(lo[1]), int(hi[0] - lo[0] + 1), int(hi[1] - lo[1] + 1)


def build_ground_model(cloud: SemanticPointCloud, cell_size: float = DEFAULT_GROUND_CELL,
                       extent_points: np.ndarray | None = None) -> GroundModel:
    """Per-cell 5th-percentile height of ground-labeled points.

    The grid covers the x-y bounding rectangle of ``extent_points`` (default:
    the whole cloud); cells without ground points are invalid.
    """
    if not cell_size > 0:
        raise ValueError(f"cell size must be positive, got {cell_size}")
    ground_id = cloud.classes.id("ground") if "ground" in cloud.classes else GROUND
    ground = cloud.points[cloud.labels == ground_id]
    if len(ground) == 0:
        raise NoGroundPoints("cloud has no ground-labeled points")
    extent = cloud.points if extent_points is None else np.vstack([extent_points, ground])
    i0, j0, nx, ny = _grid_extent(extent[:, :2], cell_size)
    ci = np.floor(ground[:, 0] / cell_size).astype(np.int64) - i0
    cj = np.floor(ground[:, 1] / cell_size).astype(np.int64) - j0
    flat = ci * ny + cj
    order = np.lexsort((ground[:, 2], flat))
    flat_s, z_s = flat[order], ground[order, 2]
    cells, starts, counts = np.unique(flat_s, return_index=True, return_counts=True)
    pos = (counts - 1) * (GROUND_PERCENTILE / 100.0)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, counts - 1)
    frac = pos - lo
    value = z_s[starts + lo] * (1.0 - frac) + z_s[starts + hi] * frac
    heights = np.full(nx * ny, np.nan)
    heights[cells] = value
    return GroundModel(cell_size, i0, j0, heights.reshape(nx, ny))


@dataclass(frozen=True)
class HoleFootprints:
    """Grid cells (world-aligned multiples of ``cell_size``) left bare by removal."""

    cell_size: float
    cells: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def __len__(self):
        return len(self.cells)


def remove_movable(cloud: SemanticPointCloud, movable_classes=MOVABLE_CLASSES,
                   cell_size: float = DEFAULT_GROUND_CELL):
    """Drop points of movable classes.

    Returns the cleaned cloud and the ground-shadow cells of the removed
    points: every grid cell under a removed point lost the ground it occluded.
    """
    movable_classes = [c for c in movable_classes]
    if not movable_classes:
        raise ValueError("movable_classes must be non-empty")
    ids = cloud.classes.ids(movable_classes)
    drop = np.isin(cloud.labels, ids)
    removed = cloud.points[drop]
    cells = np.unique(np.floor(removed[:, :2] / cell_size).astype(np.int64), axis=0)
    return cloud.subset(~drop), HoleFootprints(cell_size, cells.reshape(-1, 2))


@dataclass
class HoleFillResult:
    cloud: SemanticPointCloud
    added: int
    unfillable: list[np.ndarray]


def fill_holes(cloud: SemanticPointCloud, ground: GroundModel, holes: HoleFootprints,
               target_spacing: float = DEFAULT_FILL_SPACING) -> HoleFillResult:
    """Resample synthetic ground over hole cells.

    Hole cells are grouped into 8-connected components. Heights of invalid
    hole cells are propagated inward from valid cells of the component and
    its one-cell ring; new points sit on a ``target_spacing`` lattice with z
    from bilinear interpolation. Components with no valid cell nearby are
    reported as unfillable and skipped.
    """
    if not target_spacing > 0:
        raise ValueError("target spacing must be positive")
    if len(holes) == 0:
        return HoleFillResult(cloud, 0, [])
    if not math.isclose(holes.cell_size, ground.cell_size):
        raise ValueError("hole footprint grid and ground grid differ")
    nx, ny = ground.shape
    local = holes.cells - np.array([ground.i0, ground.j0])
    in_grid = (local[:, 0] >= 0) & (local[:, 0] < nx) & (local[:, 1] >= 0) & (local[:, 1] < ny)
    unfillable = [holes.cells[~in_grid]] if (~in_grid).any() else []
    local = local[in_grid]
    mask = np.zeros((nx, ny), dtype=bool)
    mask[local[:, 0], local[:, 1]] = True
    labels, count = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    heights = np.array(ground.heights)
    known = np.isfinite(heights)
    kernel = np.ones((3, 3))
    kernel[1, 1] = 0
    fill_cells = []
    for comp in range(1, count + 1):
        comp_mask = labels == comp
        ring = ndimage.binary_dilation(comp_mask, structure=np.ones((3, 3), dtype=bool))
        if not (known & ring).any():
            cells = np.argwhere(comp_mask) + np.array([ground.i0, ground.j0])
            unfillable.append(cells)
            continue
        todo = comp_mask & ~known
        while todo.any():
            vals = np.where(known, heights, 0.0)
            s = ndimage.convolve(vals, kernel, mode="constant")
            n = ndimage.convolve(known.astype(float), kernel, mode="constant")
            step = todo & (n > 0)
            if not step.any():
                break
            heights[step] = s[step] / n[step]
            known = known | step
            todo &= ~step
        fill_cells.append(np.argwhere(comp_mask))
    for cells in unfillable:
        warnings.warn(HoleUnfillable(f"{len(cells)} hole cells have no valid ground nearby"))
    if not fill_cells:
        return HoleFillResult(cloud, 0, unfillable)
    cells = np.concatenate(fill_cells)
    per_side = max(1, int(round(ground.cell_size / target_spacing)))
    offs = (np.arange(per_side) + 0.5) * (ground.cell_size / per_side)
    ox, oy = np.meshgrid(offs, offs, indexing="ij")
    ox, oy = ox.ravel(), oy.ravel()
    x = ((cells[:, 0:1] + ground.i0) * ground.cell_size + ox).ravel()
    y = ((cells[:, 1:2] + ground.j0) * ground.cell_size + oy).ravel()
    z = _bilinear(heights, ground.cell_size, ground.i0, ground.j0, x, y)
    ok = np.isfinite(z)
    new_pts = np.stack([x[ok], y[ok], z[ok]], axis=1)
    ground_id = cloud.classes.id("ground")
    extra = SemanticPointCloud(
        new_pts,
        np.full(len(new_pts), ground_id, dtype=np.uint32),
        None if cloud.materials is None else np.zeros(len(new_pts), dtype=np.uint32),
        None if cloud.normals is None else np.tile([0.0, 0.0, 1.0], (len(new_pts), 1)),
        cloud.classes,
    )
    LOGGER.info("filled %d hole cells with %d ground points", len(cells), len(new_pts))
    return HoleFillResult(cloud.concatenate(extra), len(new_pts), unfillable)


@dataclass(eq=False)
class BackgroundScene:
    """Obstacle-free background ready for rendering.

    ``cloud`` carries per-point normals; ``materials`` is indexed by the
    cloud's material IDs (ID 0 when the cloud has none).
    """

    cloud: SemanticPointCloud
    ground: GroundModel
    index: SpatialGridIndex
    materials: list[Material] = field(default_factory=lambda: [Material(0.5, name="background")])
    stats: dict = field(default_factory=dict)

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_point_cloud(self.cloud, directory / "cloud.ply")
        self.ground.save(directory / "ground.grid")
        meta = {
            "version": 1,
            "frame": "right-handed, z-up, meters",
            "index_cell": self.index.cell_size,
            "materials": [
                {"name": m.name, "reflectivity": m.reflectivity, "transparent": m.transparent}
                for m in self.materials
            ],
            "stats": self.stats,
        }
        _atomic_write(directory / "scene.json",
                      (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode())

    @classmethod
    def load(cls, directory) -> BackgroundScene:
        directory = Path(directory)
        meta = json.loads((directory / "scene.json").read_text())
        cloud = read_point_cloud(directory / "cloud.ply")
        ground = GroundModel.load(directory / "ground.grid")
        mats = [Material(m["reflectivity"], m["transparent"], m["name"]) for m in meta["materials"]]
        return cls(cloud, ground, SpatialGridIndex(cloud.points, meta["index_cell"]), mats,
                   meta.get("stats", {}))


def build_background(cloud: SemanticPointCloud, movable_classes=MOVABLE_CLASSES,
                     ground_cell: float = DEFAULT_GROUND_CELL,
                     fill_spacing: float = DEFAULT_FILL_SPACING,
                     normal_radius: float | None = None,
                     materials: list[Material] | None = None) -> BackgroundScene:
    """Run removal, ground modeling, hole filling and normal estimation."""
    from .render.normals import estimate_point_normals

    if not cloud.has_labels:
        raise ValueError("background cloud carries no labels; semantic labels are required")
    before = cloud.class_counts()
    cleaned, holes = remove_movable(cloud, movable_classes, ground_cell)
    ground = build_ground_model(cleaned, ground_cell, extent_points=cloud.points)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", HoleUnfillable)
        result = fill_holes(cleaned, ground, holes, fill_spacing)
    filled = result.cloud
    ground = build_ground_model(filled, ground_cell, extent_points=cloud.points)
    if normal_radius is None:
        normal_radius = max(3.0 * fill_spacing, 0.1)
    index = SpatialGridIndex(filled.points, normal_radius)
    viewpoint = filled.points.mean(axis=0) + np.array([0.0, 0.0, 50.0])
    normals = estimate_point_normals(filled, index, normal_radius, viewpoint)
    filled = filled.with_normals(normals)
    removed = {name: count for name, count in before.items() if name in set(movable_classes)}
    stats = {
        "input_points": len(cloud),
        "removed_per_class": removed,
        "hole_cells": len(holes),
        "filled_points": result.added,
        "unfillable_cells": int(sum(len(c) for c in result.unfillable)),
        "non_ground_holes": "left open",
        "output_points": len(filled),
    }
    return BackgroundScene(filled, ground, index,
                           materials or [Material(0.5, name="background")], stats)
