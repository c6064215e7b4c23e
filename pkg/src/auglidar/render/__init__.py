"""Cube-map rendering, beam lookup and frame simulation."""

from __future__ import annotations

from .cubemap import (
    DEFAULT_RESOLUTION,
    FACE_NAMES,
    BeamHits,
    CubeFaceMaps,
    SceneGeometry,
    SplatParams,
    direction_to_face_pixel,
    face_pixel_to_direction,
    lookup_beams,
    pixel_half_diagonal,
    render_cube_maps,
)
from .kernels import BACKEND
from .normals import estimate_point_normals
from .simulate import FrameAccounting, SimulatedPoints, simulate_frame, simulate_geometry

__all__ = [
    "BACKEND",
    "DEFAULT_RESOLUTION",
    "FACE_NAMES",
    "BeamHits",
    "CubeFaceMaps",
    "FrameAccounting",
    "SceneGeometry",
    "SimulatedPoints",
    "SplatParams",
    "direction_to_face_pixel",
    "estimate_point_normals",
    "face_pixel_to_direction",
    "lookup_beams",
    "pixel_half_diagonal",
    "render_cube_maps",
    "simulate_frame",
    "simulate_geometry",
]
