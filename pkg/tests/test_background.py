from __future__ import annotations

import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from auglidar.background import (
    BackgroundScene,
    GroundModel,
    HoleUnfillable,
    NoGroundPoints,
    build_background,
    build_ground_model,
    fill_holes,
    ground_height,
    remove_movable,
)
from auglidar.cloud import ClassTable, SemanticPointCloud

CLASSES = ClassTable()
GROUND = CLASSES.id("ground")
CAR = CLASSES.id("car")


def plane_cloud(x0, x1, y0, y1, spacing, slope=0.0, skip=None) -> np.ndarray:
    xs = np.arange(x0, x1, spacing) + spacing / 2
    ys = np.arange(y0, y1, spacing) + spacing / 2
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), slope * gx.ravel()], axis=1)
    if skip is not None:
        (a0, a1), (b0, b1) = skip
        inside = (pts[:, 0] >= a0) & (pts[:, 0] < a1) & (pts[:, 1] >= b0) & (pts[:, 1] < b1)
        pts = pts[~inside]
    return pts


def car_box(x0, x1, y0, y1, n=400, seed=0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.column_stack([rng.uniform(x0, x1, n), rng.uniform(y0, y1, n),
                            rng.uniform(0.3, 1.5, n)])


def labeled(*parts) -> SemanticPointCloud:
    pts = np.vstack([p for p, _ in parts])
    labels = np.concatenate([np.full(len(p), lab) for p, lab in parts])
    return SemanticPointCloud(pts, labels)


def test_no_movable_points_is_identity():
    cloud = labeled((plane_cloud(0, 2, 0, 2, 0.1), GROUND))
    cleaned, holes = remove_movable(cloud)
    assert cleaned.equals(cloud)
    assert len(holes) == 0


def test_removes_exactly_the_car_points():
    rng = np.random.default_rng(0)
    cloud = labeled((rng.uniform(0, 5, (100, 3)), GROUND), (rng.uniform(0, 5, (20, 3)), CAR))
    cleaned, _ = remove_movable(cloud)
    assert len(cleaned) == 100
    assert not np.isin(cleaned.labels, CLASSES.ids(["car", "truck", "cyclist", "pedestrian"])).any()


def test_hole_footprint_is_car_shadow():
    cloud = labeled((plane_cloud(0, 5, 0, 5, 0.1, skip=((2, 3), (1, 2))), GROUND),
                    (car_box(2.01, 2.99, 1.01, 1.99), CAR))
    _, holes = remove_movable(cloud, cell_size=0.5)
    assert sorted(map(tuple, holes.cells)) == [(4, 2), (4, 3), (5, 2), (5, 3)]


def test_remove_movable_idempotent():
    cloud = labeled((plane_cloud(0, 3, 0, 3, 0.2), GROUND), (car_box(1, 2, 1, 2), CAR))
    once, _ = remove_movable(cloud)
    twice, holes = remove_movable(once)
    assert twice.equals(once)
    assert len(holes) == 0


def test_flat_plane_ground_heights():
    model = build_ground_model(labeled((plane_cloud(0, 10, 0, 10, 0.05), GROUND)), 0.5)
    assert model.valid.all()
    assert np.max(np.abs(model.heights)) <= 1e-6


def test_sloped_plane_cell_heights():
    slope, cell = 0.1, 0.5
    model = build_ground_model(labeled((plane_cloud(0, 10, 0, 4, 0.05, slope), GROUND)), cell)
    i, _ = np.meshgrid(np.arange(model.shape[0]), np.arange(model.shape[1]), indexing="ij")
    cx, _ = model.cell_center(i, 0)
    assert np.max(np.abs(model.heights - slope * cx)) <= cell * slope


@given(st.floats(-0.3, 0.3), st.floats(0.25, 1.0), st.integers(0, 2 ** 32 - 1))
@settings(max_examples=25, deadline=None)
def test_planar_ground_height_error_bound(slope, cell, seed):
    pts = plane_cloud(0, 6, 0, 3, 0.05, slope)
    model = build_ground_model(labeled((pts, GROUND)), cell)
    rng = np.random.default_rng(seed)
    q = rng.uniform([0, 0], [6, 3], (200, 2))
    h = model.heights_at(q[:, 0], q[:, 1])
    ok = np.isfinite(h)
    assert ok.all()
    assert np.max(np.abs(h - slope * q[:, 0])) <= cell * abs(slope) + 1e-6


def test_no_ground_points():
    with pytest.raises(NoGroundPoints):
        build_ground_model(labeled((np.random.default_rng(0).normal(size=(10, 3)), CAR)), 0.5)


def test_ground_height_queries():
    model = GroundModel(1.0, 0, 0, np.array([[0.0, 0.0], [1.0, 1.0]]))
    assert ground_height(model, 0.5, 0.5) == 0.0
    assert ground_height(model, 1.5, 1.5) == 1.0
    assert math.isclose(ground_height(model, 1.0, 0.5), 0.5)
    assert ground_height(model, -3.0, 0.5) is None
    assert ground_height(model, 0.5, 2.5) is None


def test_ground_model_round_trip(tmp_path):
    model = GroundModel(0.5, -3, 7, np.array([[0.1, np.nan], [2.0, -1.0]]))
    model.save(tmp_path / "g.grid")
    back = GroundModel.load(tmp_path / "g.grid")
    assert (back.cell_size, back.i0, back.j0) == (0.5, -3, 7)
    assert np.array_equal(back.heights, model.heights, equal_nan=True)
    assert (tmp_path / "g.grid").read_bytes()[:8] == b"AUGLGRND"


def test_fill_one_square_meter_hole():
    ground = plane_cloud(0, 5, 0, 5, 0.05, skip=((2, 3), (2, 3)))
    cloud = labeled((ground, GROUND), (car_box(2.0, 2.999, 2.0, 2.999), CAR))
    cleaned, holes = remove_movable(cloud, cell_size=0.5)
    model = build_ground_model(cleaned, 0.5, extent_points=cloud.points)
    result = fill_holes(cleaned, model, holes, 0.1)
    assert result.added == 100
    new = result.cloud.points[len(cleaned):]
    assert np.all(np.abs(new[:, 2]) <= 1e-6)
    assert np.all(result.cloud.labels[len(cleaned):] == GROUND)
    assert np.all((new[:, :2] >= 2.0) & (new[:, :2] < 3.0))


def test_fill_preserves_existing_points():
    ground = plane_cloud(0, 5, 0, 5, 0.1, slope=0.05, skip=((1, 2), (1, 2)))
    cloud = labeled((ground, GROUND), (car_box(1.0, 1.999, 1.0, 1.999), CAR))
    cleaned, holes = remove_movable(cloud, cell_size=0.5)
    model = build_ground_model(cleaned, 0.5, extent_points=cloud.points)
    filled = fill_holes(cleaned, model, holes, 0.1).cloud
    assert np.array_equal(filled.points[:len(cleaned)], cleaned.points)
    assert np.array_equal(filled.labels[:len(cleaned)], cleaned.labels)


def test_no_holes_is_identity():
    cloud = labeled((plane_cloud(0, 2, 0, 2, 0.1), GROUND))
    model = build_ground_model(cloud, 0.5)
    _, holes = remove_movable(cloud)
    result = fill_holes(cloud, model, holes, 0.1)
    assert result.cloud is cloud and result.added == 0


def test_isolated_hole_is_unfillable():
    cloud = labeled((plane_cloud(0, 2, 0, 2, 0.1), GROUND), (car_box(6, 7, 6, 7), CAR))
    cleaned, holes = remove_movable(cloud, cell_size=0.5)
    model = build_ground_model(cleaned, 0.5, extent_points=cloud.points)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        result = fill_holes(cleaned, model, holes, 0.1)
    assert any(issubclass(w.category, HoleUnfillable) for w in caught)
    assert len(result.cloud) == len(cleaned)
    assert result.unfillable


def test_build_background_requires_labels():
    cloud = SemanticPointCloud(np.zeros((5, 3)), has_labels=False)
    with pytest.raises(ValueError, match="labels"):
        build_background(cloud)


def test_demo_background_is_clean(demo_scan, demo_background):
    bg = demo_background
    movable = CLASSES.ids(["car", "truck", "cyclist", "pedestrian", "other"])
    assert not np.isin(bg.cloud.labels, movable).any()
    xmin, ymin, xmax, ymax = bg.ground.bounds
    lo, hi = demo_scan.points.min(axis=0), demo_scan.points.max(axis=0)
    assert xmin <= lo[0] and ymin <= lo[1] and xmax >= hi[0] and ymax >= hi[1]
    assert bg.stats["removed_per_class"]["car"] == int(np.sum(demo_scan.labels == CAR))
    assert np.allclose(np.linalg.norm(bg.cloud.normals, axis=1), 1.0)


def test_background_bundle_round_trip(tmp_path, demo_background):
    demo_background.save(tmp_path / "bg")
    back = BackgroundScene.load(tmp_path / "bg")
    assert len(back.cloud) == len(demo_background.cloud)
    assert np.array_equal(back.ground.heights, demo_background.ground.heights, equal_nan=True)
    assert back.materials == demo_background.materials
