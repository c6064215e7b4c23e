"""Uniform-grid spatial index for fixed-radius neighbor queries."""

from __future__ import annotations

import itertools

import numpy as np

from .geometry import as_points


class SpatialGridIndex:
    """Hash grid over 3D points.

    Points are sorted by cell; occupied cells are kept as sorted int64 keys
    so lookups are a ``searchsorted`` away. Queries return indices into the
    original point array.
    """

    def __init__(self, points, cell_size: float):
        if not cell_size > 0:
            raise ValueError(f"cell size must be positive, got {cell_size}")
        self.cell_size = float(cell_size)
        self.points = as_points(points) if len(points) else np.zeros((0, 3))
        n = len(self.points)
        if n == 0:
            self._lo = np.zeros(3, dtype=np.int64)
            self._dims = np.ones(3, dtype=np.int64)
            self.keys = np.zeros(0, dtype=np.int64)
            self.starts = np.zeros(0, dtype=np.int64)
            self.counts = np.zeros(0, dtype=np.int64)
            self.order = np.zeros(0, dtype=np.int64)
            return
        cells = np.floor(self.points / self.cell_size).astype(np.int64)
        self._lo = cells.min(axis=0) - 1
        self._dims = cells.max(axis=0) - self._lo + 2
        keys = self._linear(cells)
        self.order = np.argsort(keys, kind="stable")
        sorted_keys = keys[self.order]
        self.keys, self.starts, self.counts = np.unique(
            sorted_keys, return_index=True, return_counts=True
        )

    def __len__(self):
        return len(self.points)

    def _linear(self, cells: np.ndarray) -> np.ndarray:
        c = cells - self._lo
        return (c[:, 0] * self._dims[1] + c[:, 1]) * self._dims[2] + c[:, 2]

    def _cell_ranges(self, cells: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(start, count) into ``order`` for each cell; count 0 when empty."""
        inside = np.all((cells > self._lo) & (cells < self._lo + self._dims - 1), axis=1)
        keys = self._linear(cells)
        pos = np.searchsorted(self.keys, keys)
        pos_c = np.minimum(pos, len(self.keys) - 1)
        hit = inside & (len(self.keys) > 0)
        if len(self.keys):
            hit &= self.keys[pos_c] == keys
        start = np.where(hit, self.starts[pos_c] if len(self.keys) else 0, 0)
        count = np.where(hit, self.counts[pos_c] if len(self.keys) else 0, 0)
        return start, count

    def query(self, center, radius: float) -> np.ndarray:
        """Sorted indices of points within ``radius`` (inclusive) of ``center``."""
        _, idx = self.query_pairs(as_points(center), radius)
        return np.sort(idx)

    def query_pairs(self, centers, radius: float, max_pairs: int | None = None):
        """All (center index, point index) pairs closer than ``radius``.

        Candidate cells are enumerated in a vectorized pass over every center.
        """
        centers = as_points(centers) if len(centers) else np.zeros((0, 3))
        empty = (np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))
        if len(self.points) == 0 or len(centers) == 0 or radius < 0:
            return empty
        reach = int(np.ceil(radius / self.cell_size))
        if (2 * reach + 1) ** 3 > max(len(self.keys), 27):
            # the radius spans more cells than are occupied: scan points directly
            return self._scan_pairs(centers, radius)
        base = np.floor(centers / self.cell_size).astype(np.int64)
        offsets = np.array(list(itertools.product(range(-reach, reach + 1), repeat=3)),
                           dtype=np.int64)
        q_all, p_all = [], []
        r2 = radius * radius
        for off in offsets:
            start, count = self._cell_ranges(base + off)
            has = np.nonzero(count)[0]
            if len(has) == 0:
                continue
            cnt = count[has]
            q = np.repeat(has, cnt)
            first = np.repeat(start[has], cnt)
            within = np.arange(len(q)) - np.repeat(np.cumsum(cnt) - cnt, cnt)
            p = self.order[first + within]
            d2 = np.sum((self.points[p] - centers[q]) ** 2, axis=1)
            keep = d2 <= r2
            q_all.append(q[keep])
            p_all.append(p[keep])
        if not q_all:
            return empty
        return np.concatenate(q_all), np.concatenate(p_all)

    def _scan_pairs(self, centers, radius: float, chunk: int = 1 << 22):
        q_all, p_all = [], []
        r2 = radius * radius
        step = max(1, chunk // len(self.points))
        for lo in range(0, len(centers), step):
            c = centers[lo:lo + step]
            d2 = np.sum((self.points[None, :, :] - c[:, None, :]) ** 2, axis=2)
            q, p = np.nonzero(d2 <= r2)
            q_all.append(q + lo)
            p_all.append(p)
        return np.concatenate(q_all), np.concatenate(p_all)


def build_index(cloud_or_points, cell_size: float) -> SpatialGridIndex:
    points = getattr(cloud_or_points, "points", cloud_or_points)
    return SpatialGridIndex(points, cell_size)
