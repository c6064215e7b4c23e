from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from auglidar.annotation import (
    KITTI,
    AnnotatedFrame,
    annotate,
    apply_dropout,
    fit_obb,
    frame_equal,
    read_frame,
    write_frame,
)
from auglidar.geometry import Material, Obb, RigidPose
from auglidar.placement import ObstacleLibrary, ObstacleModel, PlacedObstacle, ScenePlacement
from auglidar.procedural import box_mesh
from auglidar.render.simulate import SimulatedPoints

UNIT = Obb((0.0, 0.0, 0.5), (0.5, 0.5, 0.5))
POSE = RigidPose.from_yaw(0.7, (5.0, 3.0, 0.2))


def to_world(local, pose=POSE) -> np.ndarray:
    """Canonical box-centered coordinates to world, computed independently."""
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    x, y, z = local[:, 0], local[:, 1], local[:, 2] + 0.5
    return np.column_stack([c * x - s * y, s * x + c * y, z]) + pose.translation


def cube_library() -> ObstacleLibrary:
    mesh = box_mesh((-0.5, -0.5, 0.0), (0.5, 0.5, 1.0))
    return ObstacleLibrary({"cube": ObstacleModel("cube", "car", mesh, (Material(0.5),))})


def points_for(instances, positions) -> SimulatedPoints:
    n = len(positions)
    return SimulatedPoints(positions, np.arange(n) % 64, instances, np.full(n, 5),
                           np.zeros(n), np.linspace(0.1, 1.0, n))


def test_no_points_no_box():
    assert fit_obb(np.zeros((0, 3)), UNIT, POSE, 0.01) is None


def test_full_extent_gives_posed_box():
    corners = to_world(np.array([[sx, sy, sz] for sx in (-.5, .5) for sy in (-.5, .5)
                                 for sz in (-.5, .5)]))
    box = fit_obb(corners, UNIT, POSE, 0.015)
    posed = UNIT.transformed(POSE)
    assert np.allclose(box.center, posed.center, atol=1e-12)
    assert np.allclose(box.half_extents, posed.half_extents + 0.015, atol=1e-12)
    assert abs(box.yaw - posed.yaw) < 1e-12


def test_half_visible_cube():
    pad = 0.015
    g = np.linspace(0.0, 1.0, 6)
    local = np.array([[0.5 * a, -0.4 + 0.7 * b, -0.4 + 0.8 * c] for a in g for b in g for c in g])
    pts = to_world(local)
    box = fit_obb(pts, UNIT, POSE, pad)
    assert np.allclose(box.half_extents, [0.25 + pad, 0.35 + pad, 0.4 + pad], atol=1e-12)
    # x interval is [-pad, 0.5 + pad]
    expected_center = to_world(np.array([[0.25, -0.05, 0.0]]))[0]
    assert np.allclose(box.center, expected_center, atol=1e-12)
    assert box.contains(pts, atol=1e-9).all()


@given(st.integers(0, 2 ** 32 - 1), st.floats(0.0, 0.05), st.floats(-math.pi, math.pi))
@settings(max_examples=50, deadline=None)
def test_fit_containment_properties(seed, noise, yaw):
    rng = np.random.default_rng(seed)
    pose = RigidPose.from_yaw(yaw, rng.uniform(-20, 20, 3))
    n = int(rng.integers(1, 60))
    lo = rng.uniform(-0.5, 0.5, 3)
    hi = np.minimum(lo + rng.uniform(0, 1, 3), 0.5)
    local = rng.uniform(lo, hi, (n, 3)) + rng.normal(0, noise, (n, 3)) * (noise > 0)
    pts = to_world(local, pose)
    pad = 3.0 * noise
    box = fit_obb(pts, UNIT, pose, pad)
    posed = UNIT.transformed(pose)
    # points beyond the padded model box may be clipped; everything inside must be kept
    inside = posed.contains(pts, pad=pad)
    assert box.contains(pts[inside], atol=1e-9).all()
    assert posed.contains_box(box, pad=pad, atol=1e-9)


def simple_frame(n_cube=100, library=None, noise=0.0):
    library = library or cube_library()
    placement = ScenePlacement(RigidPose.identity(),
                               [PlacedObstacle(1, "cube", "car", POSE),
                                PlacedObstacle(2, "cube", "car",
                                               RigidPose.from_yaw(0.0, (-8.0, 0.0, 0.0)))])
    rng = np.random.default_rng(0)
    cube = to_world(rng.uniform(-0.5, 0.5, (n_cube, 3)))
    ground = np.column_stack([rng.uniform(-20, 20, (50, 2)), np.zeros(50)])
    pts = points_for(np.r_[np.ones(n_cube, int), np.zeros(50, int)], np.vstack([cube, ground]))
    return annotate(pts, placement, library, noise, {"seed": 7}, ("unknown", "car")), library


def test_annotate_absent_box_for_unhit_obstacle():
    frame, _ = simple_frame()
    assert [o.box is not None for o in frame.obstacles] == [True, False]
    assert len(frame.labeled()) == 1
    assert frame.meta["seed"] == 7


def test_unknown_instance_rejected():
    pts = points_for(np.array([3]), np.zeros((1, 3)))
    with pytest.raises(ValueError):
        AnnotatedFrame(pts, [], RigidPose.identity())


def test_min_points_threshold():
    library = cube_library()
    placement = ScenePlacement(RigidPose.identity(), [PlacedObstacle(1, "cube", "car", POSE)])
    pts = points_for(np.ones(3, int), to_world(np.zeros((3, 3))))
    assert annotate(pts, placement, library, 0.0, min_points=4).obstacles[0].box is None
    assert annotate(pts, placement, library, 0.0, min_points=3).obstacles[0].box is not None


def test_dropout_zero_is_identity():
    frame, _ = simple_frame()
    assert apply_dropout(frame, 0.0, 1) is frame


def test_dropout_rejects_ratio_one():
    frame, _ = simple_frame()
    with pytest.raises(ValueError):
        apply_dropout(frame, 1.0, 1)


def test_dropout_near_one_drops_small_instance():
    frame, _ = simple_frame(n_cube=10)
    lost = 0
    for seed in range(50):
        out = apply_dropout(frame, 0.999, seed)
        box = out.obstacles[0].box
        has_points = bool(np.any(out.points.instance == 1))
        assert (box is not None) == has_points
        lost += box is None
    assert lost >= 45


def test_dropout_is_seeded_and_binomial():
    frame, _ = simple_frame(n_cube=20_000)
    a, b = apply_dropout(frame, 0.3, 5), apply_dropout(frame, 0.3, 5)
    assert a.points.equals(b.points)
    kept = [len(apply_dropout(frame, 0.3, s).points) for s in range(100)]
    n, p = len(frame.points), 0.7
    se = math.sqrt(n * p * (1 - p) / 100)
    assert abs(np.mean(kept) - n * p) <= 3 * se


def test_dropout_refits_boxes_inside_original():
    frame, library = simple_frame(n_cube=200, noise=0.01)
    out = apply_dropout(frame, 0.5, 3, library)
    box = out.obstacles[0].box
    assert frame.obstacles[0].box.contains_box(box, atol=1e-9)
    assert box.contains(out.points.positions[out.points.instance == 1].astype(float),
                        pad=1e-6).all()


def test_native_round_trip(tmp_path):
    frame, _ = simple_frame()
    written = write_frame(frame, tmp_path / "f")
    assert sorted(p.name for p in written) == ["aux.bin", "labels.txt", "meta.json", "points.bin"]
    assert (tmp_path / "f" / "points.bin").stat().st_size == 20 * 150
    assert len((tmp_path / "f" / "labels.txt").read_text().splitlines()) == 1
    back = read_frame(tmp_path / "f")
    assert frame_equal(back, frame)
    assert np.array_equal(back.points.instance[:100], np.ones(100))


def test_point_record_layout(tmp_path):
    pts = points_for(np.array([1]), np.array([[1.5, -2.0, 0.25]]))
    library = cube_library()
    placement = ScenePlacement(RigidPose.identity(), [PlacedObstacle(1, "cube", "car", POSE)])
    frame = annotate(pts, placement, library, 0.0)
    write_frame(frame, tmp_path)
    raw = (tmp_path / "points.bin").read_bytes()
    assert raw == np.array([1.5, -2.0, 0.25], "<f4").tobytes() + np.array([1, 5], "<u4").tobytes()


def test_empty_frame(tmp_path):
    frame = AnnotatedFrame(SimulatedPoints(), [], RigidPose.identity())
    write_frame(frame, tmp_path)
    assert (tmp_path / "points.bin").read_bytes() == b""
    assert (tmp_path / "labels.txt").read_text() == ""
    assert frame_equal(read_frame(tmp_path), frame)


def test_label_line_fields(tmp_path):
    frame, _ = simple_frame()
    write_frame(frame, tmp_path)
    toks = (tmp_path / "labels.txt").read_text().split()
    box = frame.labeled()[0].box
    assert toks[0] == "car"
    assert np.array_equal([float(t) for t in toks[1:]],
                          [*box.center, *box.dimensions, box.yaw])
    meta = json.loads((tmp_path / "meta.json").read_text())
    assert [o["labeled"] for o in meta["obstacles"]] == [True, False]


def test_kitti_like(tmp_path):
    frame, _ = simple_frame()
    write_frame(frame, tmp_path, KITTI)
    vel = np.frombuffer((tmp_path / "velodyne.bin").read_bytes(), "<f4").reshape(-1, 4)
    assert np.array_equal(vel[:, :3], frame.points.positions)
    assert not vel[:, 3].any()
    toks = (tmp_path / "label.txt").read_text().split()
    box = frame.labeled()[0].box
    h, w, l, x, y, z, yaw = (float(t) for t in toks[1:])
    assert np.allclose([l, w, h], box.dimensions, atol=1e-4)
    assert np.allclose([x, y, z + h / 2], box.center, atol=1e-4)
    assert abs(yaw - box.yaw) < 1e-4


def test_unknown_format(tmp_path):
    frame, _ = simple_frame()
    with pytest.raises(ValueError):
        write_frame(frame, tmp_path, "las")


def test_frame_records_sensor_frame_pose():
    library = cube_library()
    scanner = RigidPose.from_yaw(math.pi / 2, (1.0, 1.0, 1.8))
    placement = ScenePlacement(scanner, [PlacedObstacle(1, "cube", "car", POSE)])
    frame = annotate(SimulatedPoints(), placement, library, 0.0)
    expected = scanner.inverse().compose(POSE)
    assert frame.obstacles[0].pose == expected
