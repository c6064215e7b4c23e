"""Labeled point clouds and the class table they reference."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import RigidPose, as_points

UNKNOWN = 0
GROUND = 1

# ID order is part of the file format: files carry this table in a header comment.
DEFAULT_CLASSES = (
    "unknown",
    "ground",
    "building",
    "vegetation",
    "pole",
    "car",
    "truck",
    "cyclist",
    "pedestrian",
    "other",
)

MOVABLE_CLASSES = ("car", "truck", "cyclist", "pedestrian", "other")


@dataclass(frozen=True)
class ClassTable:
    names: tuple[str, ...] = DEFAULT_CLASSES

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ValueError("duplicate class names")

    def __len__(self):
        return len(self.names)

    def __contains__(self, name):
        return name in self.names

    def id(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown class {name!r}") from None

    def name(self, class_id: int) -> str:
        return self.names[class_id]

    def ids(self, names) -> np.ndarray:
        return np.array([self.id(n) for n in names], dtype=np.uint32)

    def encode(self) -> str:
        return " ".join(f"{i}:{n}" for i, n in enumerate(self.names))

    @classmethod
    def decode(cls, text: str) -> ClassTable:
        pairs = [tok.split(":", 1) for tok in text.split()]
        pairs.sort(key=lambda p: int(p[0]))
        if [int(p[0]) for p in pairs] != list(range(len(pairs))):
            raise ValueError(f"class table IDs must be 0..n-1: {text!r}")
        return cls(tuple(p[1] for p in pairs))


@dataclass(frozen=True, eq=False)
class SemanticPointCloud:
    """Points with one class label each, plus optional material IDs and normals.

    ``has_labels`` is False when the cloud was read from a file without a
    label field; labels are then all ``unknown``.
    """

    points: np.ndarray
    labels: np.ndarray | None = None
    materials: np.ndarray | None = None
    normals: np.ndarray | None = None
    classes: ClassTable = field(default_factory=ClassTable)
    has_labels: bool = True

    def __post_init__(self):
        pts = as_points(self.points) if len(self.points) else np.zeros((0, 3))
        n = len(pts)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        if self.labels is None:
            labels = np.full(n, UNKNOWN, dtype=np.uint32)
        else:
            labels = np.asarray(self.labels, dtype=np.uint32).reshape(-1)
        if len(labels) != n:
            raise ValueError(f"{len(labels)} labels for {n} points")
        if n and labels.max() >= len(self.classes):
            raise ValueError(f"label {labels.max()} not in class table")
        mats = None
        if self.materials is not None:
            mats = np.asarray(self.materials, dtype=np.uint32).reshape(-1)
            if len(mats) != n:
                raise ValueError("one material ID per point required")
        normals = None
        if self.normals is not None:
            normals = np.asarray(self.normals, dtype=float).reshape(-1, 3)
            if len(normals) != n:
                raise ValueError("one normal per point required")
        for arr in (pts, labels, mats, normals):
            if arr is not None:
                arr.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "materials", mats)
        object.__setattr__(self, "normals", normals)

    def __len__(self):
        return len(self.points)

    def subset(self, mask) -> SemanticPointCloud:
        return SemanticPointCloud(
            self.points[mask],
            self.labels[mask],
            None if self.materials is None else self.materials[mask],
            None if self.normals is None else self.normals[mask],
            self.classes,
            self.has_labels,
        )

    def with_normals(self, normals) -> SemanticPointCloud:
        return replace(self, normals=normals)

    def transformed(self, pose: RigidPose) -> SemanticPointCloud:
        pts = pose.apply(self.points) if len(self) else self.points
        normals = None
        if self.normals is not None and len(self):
            normals = pose.apply_vectors(self.normals)
        return replace(self, points=pts, normals=normals)

    def concatenate(self, other: SemanticPointCloud) -> SemanticPointCloud:
        if other.classes != self.classes:
            raise ValueError("class tables differ")

        def cat(a, b, n_a, n_b, width=None):
            if a is None and b is None:
                return None
            shape = (n_a,) if width is None else (n_a, width)
            shape_b = (n_b,) if width is None else (n_b, width)
            a = np.zeros(shape) if a is None else a
            b = np.zeros(shape_b) if b is None else b
            return np.concatenate([a, b])

        n_a, n_b = len(self), len(other)
        return SemanticPointCloud(
            np.concatenate([self.points, other.points]),
            np.concatenate([self.labels, other.labels]),
            cat(self.materials, other.materials, n_a, n_b),
            cat(self.normals, other.normals, n_a, n_b, 3),
            self.classes,
            self.has_labels and other.has_labels,
        )

    def class_counts(self) -> dict[str, int]:
        counts = np.bincount(self.labels, minlength=len(self.classes))
        return {self.classes.name(i): int(c) for i, c in enumerate(counts) if c}

    def equals(self, other: SemanticPointCloud) -> bool:
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return np.array_equal(a, b)

        return (
            self.classes == other.classes
            and same(self.points, other.points)
            and same(self.labels, other.labels)
            and same(self.materials, other.materials)
            and same(self.normals, other.normals)
        )
