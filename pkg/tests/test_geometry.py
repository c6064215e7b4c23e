from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.distance import pdist
from scipy.spatial.transform import Rotation
from shapely.geometry import Polygon

from auglidar.geometry import (
    Material,
    Obb,
    RigidPose,
    TriangleMesh,
    footprints_overlap,
    transform,
    wrap_angle,
)

angles = st.floats(-20.0, 20.0, allow_nan=False)
coords = st.floats(-100.0, 100.0, allow_nan=False)


def random_pose(seed) -> RigidPose:
    rng = np.random.default_rng(seed)
    rot = Rotation.random(random_state=seed).as_matrix()
    return RigidPose(rot, rng.uniform(-50, 50, 3))


def test_identity_leaves_points_unchanged(rng):
    pts = rng.normal(size=(50, 3))
    assert np.array_equal(transform(pts, RigidPose.identity()), pts)


def test_yaw_pi_flips_x_axis():
    out = RigidPose.from_yaw(math.pi).apply([1.0, 0.0, 0.0])[0]
    assert np.allclose(out, [-1.0, 0.0, 0.0], atol=1e-15)


@given(st.integers(0, 2 ** 31))
@settings(max_examples=50, deadline=None)
def test_compose_with_inverse_is_identity(seed):
    pose = random_pose(seed)
    pts = np.random.default_rng(seed).uniform(-100, 100, (200, 3))
    back = pose.compose(pose.inverse()).apply(pts)
    assert np.max(np.abs(back - pts)) < 1e-9


@given(st.integers(0, 2 ** 31))
@settings(max_examples=50, deadline=None)
def test_rigid_transform_preserves_distances(seed):
    pose = random_pose(seed)
    pts = np.random.default_rng(seed + 1).uniform(-100, 100, (60, 3))
    before, after = pdist(pts), pdist(pose.apply(pts))
    assert np.all(np.abs(after - before) <= 1e-9 * np.maximum(before, 1.0))


@given(angles)
def test_yaw_is_normalized(yaw):
    pose = RigidPose.from_yaw(yaw)
    assert -math.pi <= pose.yaw < math.pi
    assert math.isclose(math.cos(pose.yaw), math.cos(yaw), abs_tol=1e-9)
    assert math.isclose(math.sin(pose.yaw), math.sin(yaw), abs_tol=1e-9)


def test_wrap_angle_half_open_interval():
    assert wrap_angle(math.pi) == -math.pi
    assert wrap_angle(-math.pi) == -math.pi


def test_pose_rejects_reflection():
    with pytest.raises(ValueError):
        RigidPose(np.diag([1.0, 1.0, -1.0]))


def test_mesh_transform_moves_vertices():
    mesh = TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    moved = transform(mesh, RigidPose.from_yaw(math.pi / 2, (1, 2, 3)))
    assert np.allclose(moved.vertices, [[1, 2, 3], [1, 3, 3], [0, 2, 3]])


def test_mesh_drops_degenerate_triangles():
    mesh = TriangleMesh([[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0]], [[0, 1, 2], [0, 1, 3]])
    assert len(mesh) == 1
    assert mesh.dropped_degenerate == 1


def test_mesh_rejects_bad_index():
    with pytest.raises(ValueError):
        TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 3]])


def test_material_reflectivity_range():
    with pytest.raises(ValueError):
        Material(1.5)


def test_obb_requires_positive_extents():
    with pytest.raises(ValueError):
        Obb((0, 0, 0), (1, 0, 1))


def test_obb_from_points_contains_points(rng):
    pts = rng.normal(size=(100, 3))
    box = Obb.from_points(pts, yaw=0.7)
    assert box.contains(pts).all()
    assert math.isclose(box.yaw, 0.7)


def test_obb_transform_matches_corner_transform():
    box = Obb((1, 0, 0.5), (2, 1, 0.5), 0.3)
    pose = RigidPose.from_yaw(1.1, (5, -3, 0))
    moved = box.transformed(pose)
    a = np.sort(moved.corners(), axis=0)
    b = np.sort(pose.apply(box.corners()), axis=0)
    assert np.allclose(a, b, atol=1e-12)


def _shapely_overlap(a: Obb, b: Obb) -> float:
    return Polygon(a.footprint()).intersection(Polygon(b.footprint())).area


@given(coords, coords, angles, st.floats(0.2, 3), st.floats(0.2, 3),
       coords, coords, angles, st.floats(0.2, 3), st.floats(0.2, 3))
@settings(max_examples=300, deadline=None)
def test_footprint_overlap_agrees_with_shapely(x1, y1, a1, l1, w1, x2, y2, a2, l2, w2):
    a = Obb((x1 / 20, y1 / 20, 0), (l1, w1, 1), a1)
    b = Obb((x2 / 20, y2 / 20, 0), (l2, w2, 1), a2)
    area = _shapely_overlap(a, b)
    if area > 1e-6:
        assert footprints_overlap(a, b)
    elif area == 0.0 and Polygon(a.footprint()).distance(Polygon(b.footprint())) > 1e-6:
        assert not footprints_overlap(a, b)


def test_footprint_margin_inflates():
    a = Obb((0, 0, 0), (1, 1, 1))
    b = Obb((2.2, 0, 0), (1, 1, 1))
    assert not footprints_overlap(a, b)
    assert footprints_overlap(a, b, margin=0.3)


def test_touching_footprints_do_not_overlap():
    a = Obb((0, 0, 0), (1, 1, 1))
    b = Obb((2, 0, 0), (1, 1, 1))
    assert not footprints_overlap(a, b)
