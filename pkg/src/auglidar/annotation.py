"""Ground-truth boxes, dropout and frame bundles on disk.

Native bundle, one directory per frame:

* ``points.bin``: N records of ``<f4 x, <f4 y, <f4 z, <u4 instance, <u4 class``
  (20 bytes each), sensor frame.
* ``aux.bin``: N records of ``<u4 beam, <u4 material, <f4 energy``.
* ``labels.txt``: one labeled obstacle per line,
  ``category cx cy cz l w h yaw`` in the sensor frame.
* ``meta.json``: seed, config hash, sensor pose and every obstacle's
  instance ID, model and pose; labeled obstacles appear in the same order
  as the lines of ``labels.txt``.

The kitti-like variant writes ``velodyne.bin`` (``<f4 x, y, z, 0``) and
``label.txt`` lines ``category h w l x y z yaw``, where ``x y z`` is the
box-bottom center in the sensor frame.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import Obb, RigidPose, wrap_angle
from .io import _atomic_write
from .render.simulate import SimulatedPoints

NATIVE = "native"
KITTI = "kitti-like"
POINT_DTYPE = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                        ("instance", "<u4"), ("label", "<u4")])
AUX_DTYPE = np.dtype([("beam", "<u4"), ("material", "<u4"), ("energy", "<f4")])
KITTI_DTYPE = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("r", "<f4")])


def fit_obb(points, canonical: Obb, pose: RigidPose, pad: float) -> Obb | None:
    """Shrink the posed model box to the observed points, padded by ``pad``.

    Each box-frame axis interval becomes the points' min/max widened by
    ``pad`` and clipped to the posed box widened by the same ``pad``.
    Returns None when there are no points.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        return None
    posed = canonical.transformed(pose)
    local = posed.to_local(pts)
    limit = posed.half_extents + pad
    lo = np.maximum(local.min(axis=0) - pad, -limit)
    hi = np.minimum(local.max(axis=0) + pad, limit)
    half = np.maximum((hi - lo) / 2.0, 1e-6)
    c, s = math.cos(posed.yaw), math.sin(posed.yaw)
    mid = (hi + lo) / 2.0
    center = posed.center + np.array([c * mid[0] - s * mid[1], s * mid[0] + c * mid[1], mid[2]])
    return Obb(center, half, posed.yaw)


@dataclass(frozen=True)
class ObstacleRecord:
    """One placed obstacle; ``box`` is None when the frame holds none of its points.

    ``pose`` and ``box`` are in the sensor frame.
    """

    instance_id: int
    category: str
    model_id: str
    pose: RigidPose
    box: Obb | None


@dataclass(eq=False)
class AnnotatedFrame:
    points: SimulatedPoints
    obstacles: list[ObstacleRecord]
    sensor_pose: RigidPose
    meta: dict = field(default_factory=dict)
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        known = {o.instance_id for o in self.obstacles}
        present = set(np.unique(self.points.instance).tolist()) - {0}
        missing = present - known
        if missing:
            raise ValueError(f"points reference instances without records: {sorted(missing)}")

    def labeled(self) -> list[ObstacleRecord]:
        return [o for o in self.obstacles if o.box is not None]


def annotate(points: SimulatedPoints, placement, library, distance_noise: float,
             meta: dict | None = None, class_names=(), min_points: int = 1) -> AnnotatedFrame:
    """Fit a box per placed obstacle from its points in the frame.

    Obstacles with fewer than ``min_points`` points get no box.
    """
    to_sensor = placement.scanner_pose.inverse()
    pad = 3.0 * distance_noise
    records = []
    pos = points.positions.astype(float)
    for o in placement.obstacles:
        pose_s = to_sensor.compose(o.pose)
        mask = points.instance == o.instance_id
        box = None
        if mask.sum() >= max(min_points, 1):
            box = fit_obb(pos[mask], library[o.model_id].canonical, pose_s, pad)
        records.append(ObstacleRecord(o.instance_id, o.category, o.model_id, pose_s, box))
    meta = dict(meta or {})
    meta.setdefault("distance_noise", distance_noise)
    meta.setdefault("min_points", min_points)
    return AnnotatedFrame(points, records, placement.scanner_pose, meta, tuple(class_names))


def apply_dropout(frame: AnnotatedFrame, drop_ratio: float, rng_seed,
                  library=None) -> AnnotatedFrame:
    """Keep each point independently with probability ``1 - drop_ratio``.

    Obstacles whose points fall below the frame's minimum support lose
    their box; with ``library`` given, surviving boxes are refitted.
    """
    if not 0.0 <= drop_ratio < 1.0:
        raise ValueError("drop ratio must lie in [0, 1)")
    if drop_ratio == 0.0:
        return frame
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    keep = rng.random(len(frame.points)) >= drop_ratio
    pts = frame.points.subset(keep)
    min_points = max(int(frame.meta.get("min_points", 1)), 1)
    pad = 3.0 * float(frame.meta.get("distance_noise", 0.0))
    records = []
    pos = pts.positions.astype(float)
    for o in frame.obstacles:
        mask = pts.instance == o.instance_id
        box = o.box
        if mask.sum() < min_points:
            box = None
        elif library is not None and box is not None:
            box = fit_obb(pos[mask], library[o.model_id].canonical, o.pose, pad)
        records.append(replace(o, box=box))
    meta = dict(frame.meta, drop_ratio=drop_ratio)
    return AnnotatedFrame(pts, records, frame.sensor_pose, meta, frame.class_names)


def _pose_json(pose: RigidPose) -> dict:
    return {"rotation": pose.rotation.tolist(), "translation": pose.translation.tolist()}


def _pose_from_json(d: dict) -> RigidPose:
    return RigidPose(np.array(d["rotation"]), np.array(d["translation"]))


def _fmt(v: float) -> str:
    return repr(float(v))


def write_frame(frame: AnnotatedFrame, directory, fmt: str = NATIVE) -> list[Path]:
    """Write ``frame`` as a native or kitti-like bundle; returns written paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    p = frame.points
    written = []
    if fmt == NATIVE:
        rec = np.empty(len(p), POINT_DTYPE)
        rec["x"], rec["y"], rec["z"] = p.positions.T
        rec["instance"], rec["label"] = p.instance, p.label
        aux = np.empty(len(p), AUX_DTYPE)
        aux["beam"], aux["material"], aux["energy"] = p.beam, p.material, p.energy
        lines = []
        for o in frame.labeled():
            b = o.box
            l, w, h = b.dimensions
            lines.append(" ".join([o.category] + [_fmt(v) for v in (*b.center, l, w, h, b.yaw)]))
        meta = dict(frame.meta)
        meta.update(
            format=NATIVE,
            points=len(p),
            classes=list(frame.class_names),
            sensor_pose=_pose_json(frame.sensor_pose),
            obstacles=[{"instance": o.instance_id, "category": o.category, "model": o.model_id,
                        "pose": _pose_json(o.pose), "labeled": o.box is not None}
                       for o in frame.obstacles],
        )
        files = {
            "points.bin": rec.tobytes(),
            "aux.bin": aux.tobytes(),
            "labels.txt": "".join(line + "\n" for line in lines).encode(),
            "meta.json": (json.dumps(meta, indent=1, sort_keys=True) + "\n").encode(),
        }
    elif fmt == KITTI:
        rec = np.zeros(len(p), KITTI_DTYPE)
        rec["x"], rec["y"], rec["z"] = p.positions.T
        lines = []
        for o in frame.labeled():
            b = o.box
            l, w, h = b.dimensions
            x, y, z = b.center
            lines.append(" ".join([o.category] + [f"{v:.4f}" for v in
                                                  (h, w, l, x, y, z - h / 2.0, b.yaw)]))
        files = {
            "velodyne.bin": rec.tobytes(),
            "label.txt": "".join(line + "\n" for line in lines).encode(),
        }
    else:
        raise ValueError(f"unknown frame format {fmt!r}")
    for name, payload in files.items():
        _atomic_write(directory / name, payload)
        written.append(directory / name)
    return written


def read_frame(directory) -> AnnotatedFrame:
    """Inverse of :func:`write_frame` for native bundles."""
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    raw = (directory / "points.bin").read_bytes()
    aux_raw = (directory / "aux.bin").read_bytes()
    if len(raw) % POINT_DTYPE.itemsize or len(aux_raw) % AUX_DTYPE.itemsize:
        raise ValueError(f"{directory}: point payload size is not a record multiple")
    rec = np.frombuffer(raw, POINT_DTYPE)
    aux = np.frombuffer(aux_raw, AUX_DTYPE)
    if len(rec) != len(aux) or len(rec) != meta["points"]:
        raise ValueError(f"{directory}: point count mismatch between files")
    pts = SimulatedPoints(np.stack([rec["x"], rec["y"], rec["z"]], axis=1), aux["beam"],
                          rec["instance"], rec["label"], aux["material"], aux["energy"])
    lines = [ln.split() for ln in (directory / "labels.txt").read_text().splitlines()
             if ln.strip()]
    obstacles = meta.pop("obstacles")
    labeled = [o for o in obstacles if o["labeled"]]
    if len(labeled) != len(lines):
        raise ValueError(f"{directory}: {len(lines)} label lines for {len(labeled)} labeled obstacles")
    boxes = {}
    for o, toks in zip(labeled, lines):
        if toks[0] != o["category"] or len(toks) != 8:
            raise ValueError(f"{directory}: label line {' '.join(toks)!r} does not match metadata")
        cx, cy, cz, l, w, h, yaw = (float(t) for t in toks[1:])
        boxes[o["instance"]] = Obb((cx, cy, cz), (l / 2.0, w / 2.0, h / 2.0), yaw)
    records = [ObstacleRecord(o["instance"], o["category"], o["model"],
                              _pose_from_json(o["pose"]), boxes.get(o["instance"]))
               for o in obstacles]
    sensor_pose = _pose_from_json(meta.pop("sensor_pose"))
    classes = tuple(meta.pop("classes"))
    for key in ("format", "points"):
        meta.pop(key, None)
    return AnnotatedFrame(pts, records, sensor_pose, meta, classes)


def frame_equal(a: AnnotatedFrame, b: AnnotatedFrame) -> bool:
    if not a.points.equals(b.points) or len(a.obstacles) != len(b.obstacles):
        return False
    for x, y in zip(a.obstacles, b.obstacles):
        if (x.instance_id, x.category, x.model_id) != (y.instance_id, y.category, y.model_id):
            return False
        if x.pose != y.pose or (x.box is None) != (y.box is None):
            return False
        if x.box is not None and not (np.array_equal(x.box.center, y.box.center)
                                      and np.array_equal(x.box.half_extents, y.box.half_extents)
                                      and wrap_angle(x.box.yaw) == wrap_angle(y.box.yaw)):
            return False
    return a.sensor_pose == b.sensor_pose and a.meta == b.meta
