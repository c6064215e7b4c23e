"""Procedural demo content: box-built obstacle models and a street scan.

Everything here is synthetic and seeded. The street runs along x with
building facades at ``|y| = 15``; parked cars sit in the scan so background
cleaning has something to remove.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .cloud import ClassTable, SemanticPointCloud
from .geometry import Obb, RigidPose, TriangleMesh
from .io import write_obj
from .placement import Annotation

_QUADS = ((0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3))


def box_mesh(lo, hi, material: int = 0, faces=range(6)) -> TriangleMesh:
    """Axis-aligned box with outward winding; ``faces`` picks -x,+x,-y,+y,-z,+z."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    v = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1])
                  for z in (lo[2], hi[2])])
    tris = []
    for f in faces:
        a, b, c, d = _QUADS[f]
        tris += [(a, b, c), (a, c, d)]
    return TriangleMesh(v, np.array(tris), np.full(len(tris), material))


def merge_meshes(meshes) -> TriangleMesh:
    verts, tris, mats = [], [], []
    offset = 0
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + offset)
        mats.append(m.materials)
        offset += len(m.vertices)
    return TriangleMesh(np.vstack(verts), np.vstack(tris), np.concatenate(mats))


# material IDs shared by all demo models
PAINT, GLASS, TIRE = 0, 1, 2
MATERIAL_NAMES = ["paint", "glass", "tire"]


def car_mesh(length=4.3, width=1.8, height=1.5) -> TriangleMesh:
    hl, hw = length / 2, width / 2
    body_top = 0.55 * height
    parts = [box_mesh((-hl, -hw, 0.25), (hl, hw, body_top), PAINT)]
    # cabin: glass sides, painted roof
    cl, cw = 0.55 * hl, 0.9 * hw
    parts.append(box_mesh((-cl, -cw, body_top), (cl * 0.8, cw, height), GLASS, faces=range(4)))
    parts.append(box_mesh((-cl, -cw, height - 0.02), (cl * 0.8, cw, height), PAINT, faces=(5,)))
    for sx in (-0.65 * hl, 0.65 * hl):
        for sy in (-hw + 0.15, hw - 0.15):
            parts.append(box_mesh((sx - 0.32, sy - 0.12, 0.0), (sx + 0.32, sy + 0.12, 0.64), TIRE))
    return merge_meshes(parts)


def truck_mesh(length=7.5, width=2.4, height=3.2) -> TriangleMesh:
    hl, hw = length / 2, width / 2
    cab = hl - 1.8
    parts = [
        box_mesh((cab, -hw, 0.5), (hl, hw, 0.75 * height), PAINT, faces=(1, 2, 3, 4, 5, 0)),
        box_mesh((-hl, -hw, 0.6), (cab - 0.2, hw, height), PAINT),
        box_mesh((hl - 0.05, -0.8 * hw, 0.75 * height - 0.8), (hl, 0.8 * hw, 0.75 * height - 0.1),
                 GLASS, faces=(1,)),
    ]
    for sx in (-0.7 * hl, 0.0, 0.8 * hl):
        for sy in (-hw + 0.2, hw - 0.2):
            parts.append(box_mesh((sx - 0.5, sy - 0.18, 0.0), (sx + 0.5, sy + 0.18, 1.0), TIRE))
    return merge_meshes(parts)


def cyclist_mesh(length=1.8, height=1.75) -> TriangleMesh:
    hl = length / 2
    return merge_meshes([
        box_mesh((-hl, -0.04, 0.0), (-hl + 0.66, 0.04, 0.66), TIRE),
        box_mesh((hl - 0.66, -0.04, 0.0), (hl, 0.04, 0.66), TIRE),
        box_mesh((-0.3, -0.05, 0.4), (0.4, 0.05, 0.9), PAINT),
        box_mesh((-0.35, -0.22, 0.9), (0.15, 0.22, height - 0.3), PAINT),
        box_mesh((-0.2, -0.12, height - 0.3), (0.05, 0.12, height), PAINT),
    ])


def pedestrian_mesh(height=1.75) -> TriangleMesh:
    return merge_meshes([
        box_mesh((-0.12, -0.22, 0.0), (0.12, -0.04, 0.85), PAINT),
        box_mesh((-0.12, 0.04, 0.0), (0.12, 0.22, 0.85), PAINT),
        box_mesh((-0.15, -0.27, 0.85), (0.15, 0.27, height - 0.25), PAINT),
        box_mesh((-0.11, -0.1, height - 0.25), (0.11, 0.1, height), PAINT),
    ])


_MODEL_SPECS = {
    "car": [("car_sedan", "high", 0.6, dict(length=4.3, width=1.8, height=1.45)),
            ("car_compact", "high", 0.6, dict(length=3.8, width=1.7, height=1.5)),
            ("car_van", "low", 0.5, dict(length=4.9, width=1.95, height=1.9))],
    "truck": [("truck_box", "high", 0.5, dict()),
              ("truck_long", "low", 0.5, dict(length=9.5, height=3.6))],
    "cyclist": [("cyclist_a", "high", 0.4, dict()),
                ("cyclist_tall", "low", 0.4, dict(height=1.9))],
    "pedestrian": [("pedestrian_a", "high", 0.3, dict()),
                   ("pedestrian_child", "low", 0.3, dict(height=1.2))],
}
_BUILDERS = {"car": car_mesh, "truck": truck_mesh, "cyclist": cyclist_mesh,
             "pedestrian": pedestrian_mesh}


def write_demo_library(directory) -> Path:
    """Write OBJ models and ``library.csv``; returns the manifest path."""
    directory = Path(directory)
    (directory / "models").mkdir(parents=True, exist_ok=True)
    rows = []
    for category, specs in _MODEL_SPECS.items():
        for model_id, group, refl, kwargs in specs:
            mesh = _BUILDERS[category](**kwargs)
            rel = Path("models") / f"{model_id}.obj"
            used = sorted(set(mesh.materials.tolist()))
            write_obj(mesh, directory / rel, MATERIAL_NAMES[:max(used) + 1])
            rows.append([model_id, category, rel.as_posix(), group, refl])
    manifest = directory / "library.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "category", "mesh", "group", "reflectivity"])
        writer.writerows(rows)
    return manifest


# street layout, meters
HALF_LENGTH = 40.0
FACADE_Y = 15.0
LANES = (-5.5, -2.0, 2.0, 5.5)
SIDEWALK = (9.5, 13.0)


def demo_annotations(count: int, rng_seed) -> list[Annotation]:
    """Obstacle poses as an annotator would mark them on the demo street."""
    rng = np.random.default_rng(rng_seed)
    cats = rng.choice(["car", "truck", "cyclist", "pedestrian"], size=count,
                      p=[0.6, 0.1, 0.1, 0.2])
    out = []
    for cat in cats:
        x = rng.uniform(-HALF_LENGTH + 6, HALF_LENGTH - 6)
        if cat in ("car", "truck"):
            y = rng.choice(LANES) + rng.normal(0, 0.2)
            yaw = 0.0 if y < 0 else np.pi
        elif cat == "cyclist":
            y = rng.choice((-7.3, 7.3)) + rng.normal(0, 0.15)
            yaw = 0.0 if y < 0 else np.pi
        else:
            y = rng.choice((-1, 1)) * rng.uniform(*SIDEWALK)
            yaw = rng.choice((0.0, np.pi)) + rng.normal(0, 0.3)
        out.append(Annotation(str(cat), RigidPose.from_yaw(float(yaw) + rng.normal(0, 0.03),
                                                           (x, y, 0.0))))
    return out


def _grid(xs, ys):
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return gx.ravel(), gy.ravel()


def demo_street_scan(spacing: float = 0.15, parked_cars: int = 4,
                     rng_seed=0) -> SemanticPointCloud:
    """Labeled street scan: ground, facades, poles, trees and parked cars.

    Ground under each parked car is missing, as in a real scan.
    """
    rng = np.random.default_rng(rng_seed)
    classes = ClassTable()
    pts, labels = [], []

    def add(p, name):
        p = np.asarray(p, float).reshape(-1, 3)
        p = p + rng.normal(0, 0.004, p.shape)
        pts.append(p)
        labels.append(np.full(len(p), classes.id(name), dtype=np.uint32))

    cars = []
    for k in range(parked_cars):
        side = -1 if k % 2 == 0 else 1
        x = -HALF_LENGTH + 10 + k * (2 * HALF_LENGTH - 20) / max(parked_cars, 1)
        cars.append(Obb((x, side * 7.2, 0.75), (2.15, 0.9, 0.75), 0.0 if side < 0 else np.pi))
    gx, gy = _grid(np.arange(-HALF_LENGTH, HALF_LENGTH + 1e-9, spacing),
                   np.arange(-FACADE_Y, FACADE_Y + 1e-9, spacing))
    gz = np.where(np.abs(gy) > 8.0, 0.15, 0.0)  # raised sidewalks
    ground = np.stack([gx, gy, gz], axis=1)
    covered = np.zeros(len(ground), dtype=bool)
    for c in cars:
        covered |= c.inflated(0.05).contains(np.column_stack([gx, gy, np.full(len(gx), 0.75)]))
    add(ground[~covered], "ground")

    for side in (-1, 1):
        fx, fz = _grid(np.arange(-HALF_LENGTH, HALF_LENGTH + 1e-9, spacing),
                       np.arange(0.15 + spacing, 9.0, spacing))
        add(np.stack([fx, np.full(len(fx), side * FACADE_Y), fz], axis=1), "building")
    for px in np.arange(-HALF_LENGTH + 5, HALF_LENGTH, 12.0):
        for side in (-1, 1):
            ang = np.arange(0, 2 * np.pi, spacing / 0.12)
            zz = np.arange(0.15, 5.0, spacing)
            a, z = np.meshgrid(ang, zz, indexing="ij")
            ring = np.stack([px + 0.12 * np.cos(a.ravel()), side * 8.8 + 0.12 * np.sin(a.ravel()),
                             z.ravel()], axis=1)
            add(ring, "pole")
    for tx in np.arange(-HALF_LENGTH + 11, HALF_LENGTH, 12.0):
        for side in (-1, 1):
            n = int(4 * np.pi * 1.5 ** 2 / spacing ** 2)
            d = rng.normal(size=(n, 3))
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            add(d * 1.5 + np.array([tx, side * 12.0, 4.0]), "vegetation")
    for c in cars:
        lo = c.center - c.half_extents
        hi = c.center + c.half_extents
        sx, sy = _grid(np.arange(lo[0], hi[0], spacing), np.arange(lo[2], hi[2], spacing))
        faces = [np.stack([sx, np.full(len(sx), y), sy], axis=1) for y in (lo[1], hi[1])]
        tx, ty = _grid(np.arange(lo[0], hi[0], spacing), np.arange(lo[1], hi[1], spacing))
        faces.append(np.stack([tx, ty, np.full(len(tx), hi[2])], axis=1))
        local = np.vstack(faces) - c.center
        pose = RigidPose.from_yaw(c.yaw, c.center)
        add(pose.apply(local), "car")
    points = np.vstack(pts)
    return SemanticPointCloud(points, np.concatenate(labels), classes=classes)
