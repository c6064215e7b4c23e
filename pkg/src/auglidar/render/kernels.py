"""Select the rasterization backend at import time.

The compiled ``_kernels`` extension is preferred; ``AUGLIDAR_PURE_PYTHON=1``
forces the numpy fallback. Both expose ``raster_triangles``, ``splat_depth``,
``splat_accumulate`` and ``finish_normals`` with identical semantics.
"""

from __future__ import annotations

import os

from . import _kernels_py

if os.environ.get("AUGLIDAR_PURE_PYTHON") == "1":
    _compiled = None
else:
    try:
        from . import _kernels as _compiled
    except ImportError:
        _compiled = None

BACKENDS = {"python": _kernels_py}
if _compiled is not None:
    BACKENDS["cython"] = _compiled

default = _compiled if _compiled is not None else _kernels_py
BACKEND = default.BACKEND


def get(name: str | None = None):
    """Kernel module by name ("cython" or "python"); None gives the default."""
    if name is None:
        return default
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} unavailable; have {sorted(BACKENDS)}") from None
