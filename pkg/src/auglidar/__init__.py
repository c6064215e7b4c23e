"""Augmented LiDAR simulation.

Scanned, labeled backgrounds are cleaned of movable objects; obstacle models
are placed with learned pose distributions; a multi-beam scanner is simulated
against cube maps of the combined scene; frames come out with per-point
instance labels and fitted boxes.
"""

from __future__ import annotations

from .cloud import ClassTable, SemanticPointCloud
from .geometry import Material, Obb, RigidPose, TriangleMesh
from .render.kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "ClassTable", "Material", "Obb", "RigidPose", "SemanticPointCloud",
           "TriangleMesh", "__version__"]
