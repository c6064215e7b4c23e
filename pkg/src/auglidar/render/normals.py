"""Per-point normals from neighborhood covariance."""

from __future__ import annotations

import logging

import numpy as np

from ..spatial import SpatialGridIndex

LOGGER = logging.getLogger(__name__)

MIN_NEIGHBORS = 3
_CHUNK = 20000


def estimate_point_normals(cloud, index: SpatialGridIndex, radius: float,
                           viewpoint=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Unit normals: smallest-eigenvalue eigenvector of each radius neighborhood.

    Normals are flipped to face ``viewpoint``. Points with fewer than three
    neighbors (themselves included) get the unit vector toward ``viewpoint``.
    """
    points = getattr(cloud, "points", cloud)
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    n = len(points)
    viewpoint = np.asarray(viewpoint, dtype=float)
    normals = np.zeros((n, 3))
    counts = np.zeros(n, dtype=np.int64)
    for lo in range(0, n, _CHUNK):
        hi = min(n, lo + _CHUNK)
        q, p = index.query_pairs(points[lo:hi], radius)
        m = hi - lo
        d = index.points[p] - points[lo + q]
        cnt = np.bincount(q, minlength=m)
        s = np.stack([np.bincount(q, d[:, k], minlength=m) for k in range(3)], axis=1)
        ss = np.empty((m, 3, 3))
        for a in range(3):
            for b in range(a, 3):
                v = np.bincount(q, d[:, a] * d[:, b], minlength=m)
                ss[:, a, b] = v
                ss[:, b, a] = v
        safe = np.maximum(cnt, 1)[:, None]
        mean = s / safe
        cov = ss / safe[:, :, None] - mean[:, :, None] * mean[:, None, :]
        _, vecs = np.linalg.eigh(cov)
        normals[lo:hi] = vecs[:, :, 0]
        counts[lo:hi] = cnt
    to_view = viewpoint - points
    dist = np.linalg.norm(to_view, axis=1, keepdims=True)
    to_view = np.divide(to_view, dist, out=np.tile([0.0, 0.0, 1.0], (n, 1)), where=dist > 0)
    isolated = counts < MIN_NEIGHBORS
    if isolated.any():
        LOGGER.debug("%d isolated points use the view-direction fallback", int(isolated.sum()))
    normals[isolated] = to_view[isolated]
    flip = np.sum(normals * to_view, axis=1) < 0
    normals[flip] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return normals
