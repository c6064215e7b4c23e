"""Rigid poses, materials, triangle meshes and oriented boxes.

World frame is right-handed, z-up, in meters. Points are carried as
``(N, 3)`` float64 arrays rather than per-point objects.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

LOGGER = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi


def wrap_angle(angle):
    """Wrap radians into [-pi, pi)."""
    wrapped = np.mod(np.asarray(angle, dtype=float) + math.pi, TWO_PI) - math.pi
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


def as_points(points) -> np.ndarray:
    arr = np.asarray(points, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(1, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got shape {arr.shape}")
    return arr


def yaw_matrix(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class RigidPose:
    """Rotation followed by translation: ``p_out = R @ p + t``.

    Construct yaw-only poses with :meth:`from_yaw`; arbitrary rotations go
    through :meth:`from_matrix`, which checks orthonormality.
    """

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=float).reshape(3, 3)
        trans = np.array(self.translation, dtype=float).reshape(3)
        if not np.all(np.isfinite(trans)):
            raise ValueError("pose translation must be finite")
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-9) or np.linalg.det(rot) < 0:
            raise ValueError("pose rotation must be orthonormal with determinant +1")
        rot.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> RigidPose:
        return cls()

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> RigidPose:
        return cls(yaw_matrix(wrap_angle(yaw)), translation)

    @classmethod
    def from_matrix(cls, rotation, translation=(0.0, 0.0, 0.0)) -> RigidPose:
        return cls(rotation, translation)

    @property
    def yaw(self) -> float:
        """Heading of the rotated x axis about world up, in [-pi, pi)."""
        return wrap_angle(math.atan2(self.rotation[1, 0], self.rotation[0, 0]))

    def apply(self, points) -> np.ndarray:
        pts = as_points(points)
        return pts @ self.rotation.T + self.translation

    def apply_vectors(self, vectors) -> np.ndarray:
        return as_points(vectors) @ self.rotation.T

    def compose(self, other: RigidPose) -> RigidPose:
        """Pose equivalent to applying ``other`` first, then ``self``."""
        rot = self.rotation @ other.rotation
        # re-orthonormalize to keep long composition chains valid
        u, _, vt = np.linalg.svd(rot)
        rot = u @ vt
        return RigidPose(rot, self.rotation @ other.translation + self.translation)

    def inverse(self) -> RigidPose:
        rt = self.rotation.T
        return RigidPose(rt, -rt @ self.translation)

    def __eq__(self, other):
        if not isinstance(other, RigidPose):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))


@dataclass(frozen=True)
class Material:
    reflectivity: float = 0.5
    transparent: bool = False
    name: str = ""

    def __post_init__(self):
        if not 0.0 <= self.reflectivity <= 1.0:
            raise ValueError(f"reflectivity must lie in [0, 1], got {self.reflectivity}")


@dataclass(frozen=True)
class TriangleMesh:
    """Indexed triangle mesh in its model frame.

    Zero-area triangles are removed on construction; ``dropped_degenerate``
    keeps the count so loaders can report it.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    materials: np.ndarray | None = None
    dropped_degenerate: int = 0

    def __post_init__(self):
        verts = as_points(self.vertices) if len(self.vertices) else np.zeros((0, 3))
        tris = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        mats = (
            np.zeros(len(tris), dtype=np.int32)
            if self.materials is None
            else np.asarray(self.materials, dtype=np.int32).reshape(-1)
        )
        if len(mats) != len(tris):
            raise ValueError("one material ID per triangle required")
        if len(tris) and (tris.min() < 0 or tris.max() >= len(verts)):
            raise ValueError("triangle index out of range")
        if not np.all(np.isfinite(verts)):
            raise ValueError("mesh vertices must be finite")
        dropped = self.dropped_degenerate
        if len(tris):
            a, b, c = verts[tris[:, 0]], verts[tris[:, 1]], verts[tris[:, 2]]
            area2 = np.linalg.norm(np.cross(b - a, c - a), axis=1)
            keep = area2 > 1e-12
            if not keep.all():
                dropped += int((~keep).sum())
                LOGGER.warning("dropped %d degenerate triangles", int((~keep).sum()))
                tris, mats = tris[keep], mats[keep]
        for arr in (verts, tris, mats):
            arr.setflags(write=False)
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "triangles", tris)
        object.__setattr__(self, "materials", mats)
        object.__setattr__(self, "dropped_degenerate", dropped)

    def __len__(self):
        return len(self.triangles)

    def corners(self) -> np.ndarray:
        """Triangle corner coordinates, shape ``(T, 3, 3)``."""
        return self.vertices[self.triangles]

    def transformed(self, pose: RigidPose) -> TriangleMesh:
        return TriangleMesh(pose.apply(self.vertices) if len(self.vertices) else self.vertices,
                            self.triangles, self.materials, self.dropped_degenerate)


@dataclass(frozen=True)
class Obb:
    """Upright oriented box: center, positive half extents, yaw about z."""

    center: np.ndarray
    half_extents: np.ndarray
    yaw: float = 0.0

    def __post_init__(self):
        center = np.array(self.center, dtype=float).reshape(3)
        half = np.array(self.half_extents, dtype=float).reshape(3)
        if np.any(half <= 0):
            raise ValueError(f"half extents must be positive, got {half}")
        center.setflags(write=False)
        half.setflags(write=False)
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "half_extents", half)
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    @classmethod
    def from_points(cls, points, yaw: float = 0.0, min_half: float = 1e-3) -> Obb:
        """Tightest box with the given yaw around ``points``."""
        pts = as_points(points)
        local = pts @ yaw_matrix(yaw)
        lo, hi = local.min(axis=0), local.max(axis=0)
        half = np.maximum((hi - lo) / 2.0, min_half)
        center = yaw_matrix(yaw) @ ((hi + lo) / 2.0)
        return cls(center, half, yaw)

    @property
    def dimensions(self) -> np.ndarray:
        return 2.0 * self.half_extents

    def pose(self) -> RigidPose:
        return RigidPose.from_yaw(self.yaw, self.center)

    def to_local(self, points) -> np.ndarray:
        return (as_points(points) - self.center) @ yaw_matrix(self.yaw)

    def contains(self, points, pad: float = 0.0, atol: float = 1e-9) -> np.ndarray:
        local = self.to_local(points)
        return np.all(np.abs(local) <= self.half_extents + pad + atol, axis=1)

    def contains_box(self, other: Obb, pad: float = 0.0, atol: float = 1e-9) -> bool:
        return bool(self.contains(other.corners(), pad=pad, atol=atol).all())

    def inflated(self, pad: float) -> Obb:
        return Obb(self.center, self.half_extents + pad, self.yaw)

    def transformed(self, pose: RigidPose) -> Obb:
        """Box under a yaw-only pose (the box stays upright)."""
        return Obb(pose.apply(self.center)[0], self.half_extents, self.yaw + pose.yaw)

    def corners(self) -> np.ndarray:
        signs = np.array(
            [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float
        )
        return (signs * self.half_extents) @ yaw_matrix(self.yaw).T + self.center

    def footprint(self) -> np.ndarray:
        """Ground-projected corners, counter-clockwise, shape ``(4, 2)``."""
        hx, hy = self.half_extents[:2]
        local = np.array([[-hx, -hy], [hx, -hy], [hx, hy], [-hx, hy]])
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + self.center[:2]


def footprints_overlap(a: Obb, b: Obb, margin: float = 0.0) -> bool:
    """Separating-axis test on the ground footprints of two upright boxes.

    ``margin`` inflates ``a`` in x and y before testing. Touching boxes
    count as non-overlapping.
    """
    fa = Obb(a.center, a.half_extents + np.array([margin, margin, 0.0]), a.yaw).footprint()
    fb = b.footprint()
    for poly in (fa, fb):
        for i in range(4):
            edge = poly[(i + 1) % 4] - poly[i]
            axis = np.array([-edge[1], edge[0]])
            pa, pb = fa @ axis, fb @ axis
            if pa.max() <= pb.min() + 1e-12 or pb.max() <= pa.min() + 1e-12:
                return False
    return True


def transform(obj, pose: RigidPose):
    """Rigidly transform points, meshes, boxes or labeled clouds; returns a copy."""
    from .cloud import SemanticPointCloud

    if isinstance(obj, TriangleMesh):
        return obj.transformed(pose)
    if isinstance(obj, Obb):
        return obj.transformed(pose)
    if isinstance(obj, SemanticPointCloud):
        return obj.transformed(pose)
    return pose.apply(obj)
