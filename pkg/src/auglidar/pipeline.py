"""End-to-end runs and the stage commands behind the CLI.

Every ``cmd_*`` function validates its inputs before writing anything and
raises :class:`ValidationError` for bad input; other failures propagate as
runtime errors.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import os
import shutil
import tempfile
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .annotation import KITTI, NATIVE, annotate, apply_dropout, read_frame, write_frame
from .background import (
    DEFAULT_FILL_SPACING,
    DEFAULT_GROUND_CELL,
    BackgroundScene,
    HoleUnfillable,
    build_background,
)
from .cloud import MOVABLE_CLASSES
from .config import ConfigError, config_hash, dump_dataclass, load_dataclass, parse_kv
from .geometry import RigidPose
from .io import PointCloudFormatError, _atomic_write, read_point_cloud
from .placement import (
    DEFAULT_CLEARANCE,
    DEFAULT_MAP_CELL,
    DEFAULT_MIXING_RATIO,
    DEFAULT_TEMPLATE_K,
    DEFAULT_YAW_SIGMA_DEG,
    AnnotationOutOfBounds,
    CategoryPrior,
    GaussianTemplate,
    NoAnnotations,
    ObstacleLibrary,
    PlacementExhausted,
    ProbabilityMap,
    build_probability_map,
    compose_scene,
    read_annotations,
)
from .render.cubemap import DEFAULT_RESOLUTION, SplatParams
from .render.simulate import simulate_frame
from .sensor import BeamTable, SensorConfig, SensorModel, TooFewPoints, calibrate

LOGGER = logging.getLogger(__name__)

WORKERS_ENV = "AUGLIDAR_WORKERS"
MAP_SUFFIX = ".pmap"
FRAME_DIR = "frames"
MANIFEST = "manifest.json"


class ValidationError(ValueError):
    """Bad user input; maps to exit code 2."""


class FrameError(RuntimeError):
    def __init__(self, index: int, cause: BaseException):
        super().__init__(f"frame {index} failed: {type(cause).__name__}: {cause}")
        self.index = index


@dataclass(frozen=True)
class RunConfig:
    """Inputs and knobs of one simulation run.

    Relative paths resolve against the config file's directory. Per-category
    targets come from ``target.<category> = n`` keys; when none are given
    and ``obstacles`` > 0, each frame draws that many obstacles with
    categories from the prior frequencies.
    """

    background: Path
    library: Path
    maps: Path
    output: Path
    sensor: Path | None = None
    frames: int = 1
    master_seed: int = 0
    dropout: float = 0.0
    format: str = NATIVE
    obstacles: int = 0
    resolution: int = DEFAULT_RESOLUTION
    splat_radius: float = 0.03
    splat_epsilon: float = 0.05
    scanner_x: float = 0.0
    scanner_y: float = 0.0
    scanner_height: float = 1.73
    scanner_yaw_deg: float = 0.0
    clearance: float = DEFAULT_CLEARANCE
    yaw_sigma_deg: float = DEFAULT_YAW_SIGMA_DEG
    mixing_ratio: float = DEFAULT_MIXING_RATIO
    min_label_points: int = 1
    strict_placement: bool = False
    workers: int = 1
    targets: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.frames < 0:
            raise ConfigError("frames must be >= 0")
        if self.master_seed < 0 or self.master_seed >= 2 ** 32:
            raise ConfigError("master_seed must lie in [0, 2^32)")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.format not in (NATIVE, KITTI):
            raise ConfigError(f"format must be {NATIVE!r} or {KITTI!r}")
        if self.resolution < 64:
            raise ConfigError("resolution must be >= 64")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.obstacles < 0 or any(int(v) < 0 for v in self.targets.values()):
            raise ConfigError("obstacle counts must be >= 0")
        if self.min_label_points < 1:
            raise ConfigError("min_label_points must be >= 1")

    @classmethod
    def from_text(cls, text: str, source: str = "<config>", base: Path | None = None) -> RunConfig:
        values = parse_kv(text, source)
        targets = {}
        for key in sorted(k for k in values if k.startswith("target.")):
            cat = key.split(".", 1)[1]
            try:
                targets[cat] = int(values.pop(key))
            except ValueError:
                raise ConfigError(f"{source}: target count for {cat!r} must be an integer") from None
        if "targets" in values:
            raise ConfigError(f"{source}: use 'target.<category> = n' keys")
        cfg = load_dataclass(cls, values, source, base)
        return dataclasses.replace(cfg, targets=targets)

    @classmethod
    def from_file(cls, path) -> RunConfig:
        path = Path(path)
        return cls.from_text(path.read_text(), str(path), path.parent)

    def to_text(self) -> str:
        plain = dataclasses.replace(self, targets={})
        text = dump_dataclass(plain, "# auglidar run config")
        lines = [ln for ln in text.splitlines() if not ln.startswith("targets =")]
        lines += [f"target.{c} = {n}" for c, n in sorted(self.targets.items())]
        return "\n".join(lines) + "\n"

    def identity_text(self) -> str:
        """Config text with the output location removed; hashed into manifests."""
        return "\n".join(ln for ln in self.to_text().splitlines()
                         if not ln.startswith("output =")) + "\n"

    @property
    def scanner_pose(self) -> RigidPose:
        return RigidPose.from_yaw(np.radians(self.scanner_yaw_deg),
                                  (self.scanner_x, self.scanner_y, 0.0))


def frame_seed(master_seed: int, index: int) -> int:
    """Counter-based per-frame seed; injective for index < 2^32."""
    if not 0 <= index < 2 ** 32:
        raise ValueError("frame index out of range")
    return (int(master_seed) << 32) | int(index)


def frame_streams(master_seed: int, index: int) -> list[np.random.SeedSequence]:
    """Independent seed sequences for placement, simulation and dropout."""
    return np.random.SeedSequence(frame_seed(master_seed, index)).spawn(3)


@dataclass(eq=False)
class RunInputs:
    config: RunConfig
    background: BackgroundScene
    library: ObstacleLibrary
    maps: dict[str, ProbabilityMap]
    sensor: SensorModel
    prior: CategoryPrior


def load_maps(directory) -> dict[str, ProbabilityMap]:
    directory = Path(directory)
    maps = {}
    for path in sorted(directory.glob(f"*{MAP_SUFFIX}")):
        pmap = ProbabilityMap.load(path)
        maps[pmap.category or path.stem] = pmap
    return maps


def _map_masses(maps: dict[str, ProbabilityMap]) -> dict[str, float]:
    # total weight is proportional to the annotation count away from map edges
    return {c: float(m.weights.sum()) for c, m in maps.items()}


def load_inputs(config: RunConfig) -> RunInputs:
    """Load and cross-check every input of a run; raises ValidationError."""
    for name in ("background", "library", "maps"):
        path = getattr(config, name)
        if not path.exists():
            raise ValidationError(f"{name} path does not exist: {path}")
    if config.sensor is not None and not config.sensor.exists():
        raise ValidationError(f"sensor config does not exist: {config.sensor}")
    try:
        background = BackgroundScene.load(config.background)
        library = ObstacleLibrary.load(config.library)
        maps = load_maps(config.maps)
        sensor_cfg = SensorConfig.from_file(config.sensor) if config.sensor else SensorConfig()
        sensor = SensorModel(sensor_cfg)
    except (OSError, ValueError, KeyError, PointCloudFormatError) as exc:
        raise ValidationError(str(exc)) from exc
    cats = set(config.targets) if config.targets else (set(maps) if config.obstacles else set())
    for cat in sorted(cats):
        if config.targets.get(cat, 1) == 0:
            continue
        if cat not in maps:
            raise ValidationError(f"no probability map for category {cat!r} in {config.maps}")
        if cat not in library.categories:
            raise ValidationError(f"library has no models for category {cat!r}")
    counts = {c: v for c, v in _map_masses(maps).items() if c in library.categories}
    if not counts or sum(counts.values()) <= 0:
        counts = None
    prior = CategoryPrior.from_library(library, counts, config.mixing_ratio)
    if config.obstacles and not config.targets and not prior.frequencies:
        raise ValidationError("obstacles > 0 needs maps for library categories")
    return RunInputs(config, background, library, maps, sensor, prior)


def _frame_targets(inputs: RunInputs, rng: np.random.Generator) -> dict[str, int]:
    cfg = inputs.config
    if cfg.targets:
        return dict(cfg.targets)
    if cfg.obstacles == 0:
        return {}
    cats = sorted(inputs.prior.frequencies)
    p = np.array([inputs.prior.frequencies[c] for c in cats])
    drawn = rng.multinomial(cfg.obstacles, p / p.sum())
    return {c: int(n) for c, n in zip(cats, drawn) if n}


def simulate_one(inputs: RunInputs, index: int):
    """Place, simulate, annotate and drop out frame ``index``; returns (frame, record)."""
    cfg = inputs.config
    place_seq, sim_seq, drop_seq = frame_streams(cfg.master_seed, index)
    place_rng = np.random.default_rng(place_seq)
    targets = _frame_targets(inputs, place_rng)
    scanner = cfg.scanner_pose
    ground_z = inputs.background.ground.heights_at(scanner.translation[0], scanner.translation[1])
    if not np.isfinite(ground_z):
        raise ValidationError("scanner position lies outside valid ground")
    scanner = RigidPose(scanner.rotation, scanner.translation + [0.0, 0.0,
                                                                 float(ground_z) + cfg.scanner_height])
    exhausted = None
    try:
        placement = compose_scene(inputs.background, inputs.maps, inputs.prior, inputs.library,
                                  targets, place_rng, scanner, inputs.sensor.config.max_range,
                                  cfg.clearance, yaw_sigma_deg=cfg.yaw_sigma_deg)
    except PlacementExhausted as exc:
        if cfg.strict_placement:
            raise
        exhausted = exc.achieved
        placement = exc.placement
        LOGGER.warning("frame %d: %s", index, exc)
    splat = SplatParams(cfg.splat_radius, cfg.splat_epsilon)
    points, acct = simulate_frame(placement, inputs.background, inputs.library, inputs.sensor,
                                  sim_seq, splat=splat, resolution=cfg.resolution)
    meta = {
        "frame": index,
        "seed": frame_seed(cfg.master_seed, index),
        "config_hash": config_hash(cfg.identity_text()),
    }
    frame = annotate(points, placement, inputs.library, inputs.sensor.config.distance_noise,
                     meta, inputs.background.cloud.classes.names, cfg.min_label_points)
    pre = len(frame.points)
    frame = apply_dropout(frame, cfg.dropout, np.random.default_rng(drop_seq), inputs.library)
    record = {
        "index": index,
        "seed": frame_seed(cfg.master_seed, index),
        "targets": dict(sorted(targets.items())),
        "placed": placement.counts(),
        "placement_exhausted": exhausted is not None,
        "beams": acct.as_dict(),
        "points_before_dropout": pre,
        "points": len(frame.points),
        "labeled_obstacles": len(frame.labeled()),
    }
    return frame, record


_WORKER_INPUTS: RunInputs | None = None


def _worker_init(config: RunConfig):
    global _WORKER_INPUTS
    _WORKER_INPUTS = load_inputs(config)


def _worker_frame(args):
    index, staging = args
    frame, record = simulate_one(_WORKER_INPUTS, index)
    write_frame(frame, Path(staging) / f"{index:06d}", _WORKER_INPUTS.config.format)
    return record


def resolve_workers(config: RunConfig) -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ValidationError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
        if n < 1:
            raise ValidationError(f"{WORKERS_ENV} must be >= 1")
        return n
    return config.workers


def cmd_simulate(config: RunConfig | str | Path) -> dict:
    """Simulate ``config.frames`` frames into ``config.output``; returns the manifest.

    Frames are staged in a temporary directory next to the output and moved
    into place once all succeed, so a failed run leaves no partial frames.
    """
    if not isinstance(config, RunConfig):
        try:
            config = RunConfig.from_file(config)
        except (OSError, ConfigError) as exc:
            raise ValidationError(str(exc)) from exc
    inputs = load_inputs(config)
    workers = resolve_workers(config)
    out = Path(config.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=".auglidar-", dir=out.parent))
    try:
        records = []
        indices = list(range(config.frames))
        if workers > 1 and len(indices) > 1:
            with ProcessPoolExecutor(workers, initializer=_worker_init,
                                     initargs=(config,)) as pool:
                futures = [pool.submit(_worker_frame, (i, staging)) for i in indices]
                for i, fut in zip(indices, futures):
                    try:
                        records.append(fut.result())
                    except ValidationError:
                        raise
                    except Exception as exc:
                        raise FrameError(i, exc) from exc
        else:
            for i in indices:
                try:
                    frame, record = simulate_one(inputs, i)
                    write_frame(frame, staging / f"{i:06d}", config.format)
                except ValidationError:
                    raise
                except Exception as exc:
                    raise FrameError(i, exc) from exc
                records.append(record)
        manifest = {
            "version": 1,
            "config_hash": config_hash(config.identity_text()),
            "config": config.identity_text().splitlines(),
            "master_seed": config.master_seed,
            "format": config.format,
            "frames": records,
            "sensor": inputs.sensor.config.to_text().splitlines(),
        }
        frames_dir = out / FRAME_DIR
        if frames_dir.exists():
            shutil.rmtree(frames_dir)
        out.mkdir(parents=True, exist_ok=True)
        staging.rename(frames_dir)
        _atomic_write(out / MANIFEST,
                      (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode())
    finally:
        if staging.exists():
            shutil.rmtree(staging)
    return manifest


def cmd_clean_background(input_path, output_dir, movable=MOVABLE_CLASSES,
                         ground_cell: float = DEFAULT_GROUND_CELL,
                         fill_spacing: float = DEFAULT_FILL_SPACING,
                         normal_radius: float | None = None,
                         reflectivity: float = 0.5) -> dict:
    """Remove movable objects, fill ground holes and write a background bundle."""
    from .geometry import Material

    try:
        cloud = read_point_cloud(input_path)
    except (OSError, PointCloudFormatError) as exc:
        raise ValidationError(str(exc)) from exc
    if not cloud.has_labels:
        raise ValidationError(f"{input_path}: no per-point labels; background cleaning needs "
                              "semantic labels")
    if len(cloud) == 0:
        raise ValidationError(f"{input_path}: empty cloud")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", HoleUnfillable)
        scene = build_background(cloud, tuple(movable), ground_cell, fill_spacing, normal_radius,
                                 [Material(reflectivity, name="background")])
    for w in caught:
        LOGGER.warning("%s", w.message)
    scene.save(output_dir)
    return scene.stats


def cmd_build_map(annotations_path, output_dir, bounds=None, background=None,
                  cell_size: float = DEFAULT_MAP_CELL, k: int = DEFAULT_TEMPLATE_K,
                  sigma: float | None = None) -> list[Path]:
    """One ``<category>.pmap`` per annotated category.

    Bounds come from ``bounds`` (xmin, ymin, xmax, ymax) or the ground grid
    of a background bundle.
    """
    try:
        anns = read_annotations(annotations_path)
    except (OSError, ValueError) as exc:
        raise ValidationError(str(exc)) from exc
    if not anns:
        raise ValidationError(str(NoAnnotations(f"{annotations_path}: no annotations")))
    if bounds is None:
        if background is None:
            raise ValidationError("map bounds need --bounds or --background")
        from .background import GroundModel

        bounds = GroundModel.load(Path(background) / "ground.grid").bounds
    try:
        maps = build_probability_map(anns, tuple(bounds), cell_size,
                                     GaussianTemplate(k, sigma))
    except (AnnotationOutOfBounds, ValueError) as exc:
        raise ValidationError(str(exc)) from exc
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for cat, pmap in sorted(maps.items()):
        path = output_dir / f"{cat}{MAP_SUFFIX}"
        pmap.save(path)
        paths.append(path)
    return paths


def _read_beam_points(path: Path) -> tuple[np.ndarray, np.ndarray]:
    if path.is_dir():
        frame = read_frame(path)
        return frame.points.positions.astype(float), frame.points.beam.astype(np.int64)
    rows = list(csv.DictReader(io.StringIO(path.read_text())))
    if not rows or not {"x", "y", "z", "beam"} <= set(rows[0]):
        raise ValueError(f"{path}: expected CSV columns x, y, z, beam")
    pts = np.array([[float(r["x"]), float(r["y"]), float(r["z"])] for r in rows])
    beams = np.array([int(r["beam"]) for r in rows])
    return pts, beams


def cmd_calibrate(input_path, output_csv, min_points: int = 10) -> BeamTable:
    """Fit per-beam elevation and noise from beam-labeled points (sensor frame)."""
    try:
        pts, beams = _read_beam_points(Path(input_path))
        table = calibrate(pts, beams, min_points)
    except (OSError, ValueError, KeyError, TooFewPoints) as exc:
        raise ValidationError(str(exc)) from exc
    Path(output_csv).parent.mkdir(parents=True, exist_ok=True)
    table.write_csv(output_csv)
    return table


def cmd_stats(run_dir, csv_path=None) -> str:
    """Per-frame and aggregate point and obstacle counts for a run directory."""
    run_dir = Path(run_dir)
    frames_dir = run_dir / FRAME_DIR if (run_dir / FRAME_DIR).is_dir() else run_dir
    dirs = sorted(p for p in frames_dir.iterdir() if (p / "meta.json").exists()) \
        if frames_dir.is_dir() else []
    if not dirs:
        raise ValidationError(f"{run_dir}: no native frame bundles found")
    rows = []
    obstacle_totals: dict[str, int] = {}
    class_totals: dict[str, int] = {}
    for d in dirs:
        frame = read_frame(d)
        names = frame.class_names
        counts = np.bincount(frame.points.label.astype(np.int64), minlength=len(names))
        per_class = {names[i] if i < len(names) else str(i): int(c)
                     for i, c in enumerate(counts) if c}
        for name, c in per_class.items():
            class_totals[name] = class_totals.get(name, 0) + c
        labeled: dict[str, int] = {}
        for o in frame.labeled():
            labeled[o.category] = labeled.get(o.category, 0) + 1
            obstacle_totals[o.category] = obstacle_totals.get(o.category, 0) + 1
        rows.append((d.name, len(frame.points), labeled, per_class))
    n = np.array([r[1] for r in rows], dtype=float)
    lines = [f"frames: {len(rows)}",
             f"points per frame: mean {n.mean():.1f} std {n.std(ddof=1) if len(n) > 1 else 0.0:.1f}"
             f" min {int(n.min())} max {int(n.max())}",
             "labeled obstacles: " + (", ".join(f"{c}={v}" for c, v in sorted(obstacle_totals.items()))
                                      or "none"),
             "points per class: " + ", ".join(f"{c}={v}" for c, v in sorted(class_totals.items()))]
    hist, edges = np.histogram(n, bins=min(10, max(1, len(rows))))
    lines.append("point-count histogram:")
    # numpy closes the last bin on the right
    lines += [f"  [{edges[i]:.1f}, {edges[i + 1]:.1f}{']' if i == len(hist) - 1 else ')'}: {hist[i]}"
              for i in range(len(hist))]
    report = "\n".join(lines) + "\n"
    if csv_path is not None:
        cats = sorted(obstacle_totals)
        classes = sorted(class_totals)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["frame", "points"] + [f"obstacles.{c}" for c in cats]
                        + [f"points.{c}" for c in classes])
        for name, count, labeled, per_class in rows:
            writer.writerow([name, count] + [labeled.get(c, 0) for c in cats]
                            + [per_class.get(c, 0) for c in classes])
        _atomic_write(Path(csv_path), buf.getvalue().encode())
    return report
