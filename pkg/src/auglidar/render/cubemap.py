"""Cube-map rendering of hybrid point/mesh scenes and beam lookup.

Faces are indexed +x, -x, +y, -y, +z, -z. Face ``f`` looks along
``FACE_BASES[f][2]`` with ``FACE_BASES[f][0]`` as the image u axis and
``FACE_BASES[f][1]`` as the v axis; pixel rows follow v, columns follow u.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..geometry import Material, RigidPose, TriangleMesh
from . import kernels

LOGGER = logging.getLogger(__name__)

FACE_NAMES = ("+x", "-x", "+y", "-y", "+z", "-z")
FACE_BASES = np.array(
    [
        [[0, 1, 0], [0, 0, 1], [1, 0, 0]],
        [[0, -1, 0], [0, 0, 1], [-1, 0, 0]],
        [[-1, 0, 0], [0, 0, 1], [0, 1, 0]],
        [[1, 0, 0], [0, 0, 1], [0, -1, 0]],
        [[1, 0, 0], [0, 1, 0], [0, 0, 1]],
        [[1, 0, 0], [0, -1, 0], [0, 0, -1]],
    ],
    dtype=float,
)

SKY = -1
NEAR = 1e-3
GRAZE = 0.1
DEFAULT_RESOLUTION = 1024


@dataclass(frozen=True)
class SplatParams:
    radius: float = 0.03
    depth_epsilon: float = 0.05

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("splat radius must be positive")
        if self.depth_epsilon < 0:
            raise ValueError("depth epsilon must be >= 0")


def direction_to_face_pixel(directions, resolution: int):
    """Map directions to ``(face, col, row)`` pixel coordinates.

    The face is the axis of largest absolute component; ties resolve x, then
    y, then z. Returns integer arrays (scalars for a single direction).
    """
    d = np.asarray(directions, dtype=float)
    single = d.ndim == 1
    d = d.reshape(-1, 3)
    if np.any(np.all(d == 0, axis=1)):
        raise ValueError("zero direction has no cube face")
    axis = np.argmax(np.abs(d), axis=1)
    major = d[np.arange(len(d)), axis]
    face = 2 * axis + (major < 0)
    basis = FACE_BASES[face]
    fwd = np.abs(major)
    u = np.einsum("ij,ij->i", basis[:, 0], d) / fwd
    v = np.einsum("ij,ij->i", basis[:, 1], d) / fwd
    col = np.clip(np.floor((u + 1.0) * (resolution / 2.0)).astype(np.int64), 0, resolution - 1)
    row = np.clip(np.floor((v + 1.0) * (resolution / 2.0)).astype(np.int64), 0, resolution - 1)
    if single:
        return int(face[0]), int(col[0]), int(row[0])
    return face, col, row


def face_pixel_to_direction(face, col, row, resolution: int) -> np.ndarray:
    """Unit direction through the center of the given pixel(s)."""
    face = np.asarray(face)
    pix = 2.0 / resolution
    uc = -1.0 + (np.asarray(col) + 0.5) * pix
    vc = -1.0 + (np.asarray(row) + 0.5) * pix
    basis = FACE_BASES[face]
    d = basis[..., 0, :] * uc[..., None] + basis[..., 1, :] * vc[..., None] + basis[..., 2, :]
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def pixel_half_diagonal(resolution: int) -> float:
    """Largest angle between a pixel center and a direction inside that pixel."""
    return math.atan(math.sqrt(2.0) / resolution)


@dataclass(eq=False)
class SceneGeometry:
    """Everything a frame renders, flattened into arrays.

    Points carry normals, material IDs and class labels (instance 0).
    Triangles carry material IDs, instance IDs and class labels. Material
    IDs index ``materials``.
    """

    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    normals: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    point_material: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    point_label: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3, 3)))
    tri_material: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    tri_instance: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    tri_label: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    materials: list[Material] = field(default_factory=lambda: [Material(0.5, name="background")])

    @classmethod
    def build(cls, background=None, obstacles=(), background_materials=None) -> SceneGeometry:
        """Combine a background cloud (or scene) with placed obstacle meshes.

        ``obstacles`` holds ``(instance_id, world_mesh, class_id, materials)``
        tuples; each mesh's material IDs index its own ``materials`` list.
        """
        if hasattr(background, "cloud"):
            background_materials = background_materials or background.materials
            background = background.cloud
        materials = list(background_materials or [Material(0.5, name="background")])
        geo = {}
        if background is not None and len(background):
            if background.normals is None:
                raise ValueError("background points need normals; run estimate_point_normals")
            geo["points"] = background.points
            geo["normals"] = background.normals
            geo["point_material"] = (np.zeros(len(background), dtype=np.int64)
                                     if background.materials is None
                                     else background.materials.astype(np.int64))
            geo["point_label"] = background.labels.astype(np.int64)
        tris, tmat, tinst, tlab = [], [], [], []
        for instance_id, mesh, class_id, mesh_materials in obstacles:
            offset = len(materials)
            materials.extend(mesh_materials)
            tris.append(mesh.corners())
            tmat.append(mesh.materials.astype(np.int64) + offset)
            tinst.append(np.full(len(mesh), instance_id, dtype=np.int64))
            tlab.append(np.full(len(mesh), class_id, dtype=np.int64))
        if tris:
            geo.update(triangles=np.concatenate(tris), tri_material=np.concatenate(tmat),
                       tri_instance=np.concatenate(tinst), tri_label=np.concatenate(tlab))
        return cls(materials=materials, **geo)

    @classmethod
    def from_mesh(cls, mesh: TriangleMesh, materials, instance_id: int = 1,
                  class_id: int = 0) -> SceneGeometry:
        return cls.build(None, [(instance_id, mesh, class_id, list(materials))], [])


@dataclass(eq=False)
class CubeFaceMaps:
    """Per-pixel depth (inf = sky), normal, material, instance, label and source.

    ``source`` is the triangle index (>= 0), ``-2 - point index`` for
    splats, or ``-1`` for sky. Normals and ``triangles`` are in the sensor
    frame.
    """

    resolution: int
    depth: np.ndarray
    normal: np.ndarray
    source: np.ndarray
    material: np.ndarray
    instance: np.ndarray
    label: np.ndarray
    triangles: np.ndarray
    tri_normals: np.ndarray
    tri_material: np.ndarray
    tri_instance: np.ndarray
    tri_label: np.ndarray
    splat_radius: float = 0.03
    backend: str = ""

    @property
    def sky(self) -> np.ndarray:
        return self.source == SKY

    def lookup(self, directions) -> BeamHits:
        return lookup_beams(self, directions)

    def dump_pgm(self, directory, meters_per_unit: float = 0.01) -> list[Path]:
        """Write each face's depth as a 16-bit PGM.

        Gray value = depth / ``meters_per_unit`` (1 cm by default), clipped
        to 65535; sky is 0. Image rows run top (v = +1) to bottom.
        """
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for f, name in enumerate(FACE_NAMES):
            d = self.depth[f][::-1]
            img = np.where(np.isfinite(d), np.clip(np.round(d / meters_per_unit), 1, 65535), 0)
            path = directory / f"depth_{'pos' if name[0] == '+' else 'neg'}{name[1]}.pgm"
            header = f"P5\n{self.resolution} {self.resolution}\n65535\n".encode("ascii")
            path.write_bytes(header + img.astype(">u2").tobytes())
            paths.append(path)
        return paths


def _clip_near(tri: np.ndarray) -> list[np.ndarray]:
    """Clip one camera-space triangle against z >= NEAR; returns 0-2 triangles."""
    poly = []
    for i in range(3):
        a, b = tri[i], tri[(i + 1) % 3]
        a_in, b_in = a[2] >= NEAR, b[2] >= NEAR
        if a_in:
            poly.append(a)
        if a_in != b_in:
            t = (NEAR - a[2]) / (b[2] - a[2])
            p = a + t * (b - a)
            p[2] = NEAR
            poly.append(p)
    return [np.array([poly[0], poly[k], poly[k + 1]]) for k in range(1, len(poly) - 1)]


def _face_triangles(tris_cam: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Frustum-cull and near-clip camera-space triangles; returns (tris, ids)."""
    if len(tris_cam) == 0:
        return np.zeros((0, 3, 3)), np.zeros(0, dtype=np.int64)
    x, y, z = tris_cam[..., 0], tris_cam[..., 1], tris_cam[..., 2]
    outside = (
        np.all(z < NEAR, axis=1) | np.all(x > z, axis=1) | np.all(-x > z, axis=1)
        | np.all(y > z, axis=1) | np.all(-y > z, axis=1)
    )
    ids = np.nonzero(~outside)[0]
    kept = tris_cam[ids]
    crossing = np.any(kept[..., 2] < NEAR, axis=1)
    out_tris = [kept[~crossing]]
    out_ids = [ids[~crossing]]
    for k in np.nonzero(crossing)[0]:
        for piece in _clip_near(kept[k]):
            out_tris.append(piece[None])
            out_ids.append(ids[k:k + 1])
    return (np.ascontiguousarray(np.concatenate(out_tris)),
            np.ascontiguousarray(np.concatenate(out_ids)).astype(np.int64))


def render_cube_maps(scene: SceneGeometry, sensor_pose: RigidPose | None = None,
                     splat: SplatParams | None = None, resolution: int = DEFAULT_RESOLUTION,
                     max_range: float | None = None, backend: str | None = None) -> CubeFaceMaps:
    """Rasterize splats and triangles onto six faces around the sensor.

    Background points become oriented disks of ``splat.radius`` (camera-
    facing where seen edge-on), z-buffered, with normals blended over disks
    within ``splat.depth_epsilon`` of the front surface. Opaque triangles are
    then z-buffered into the same buffers; transparent ones are skipped.
    """
    if resolution < 64:
        raise ValueError("cube face resolution must be >= 64")
    splat = splat or SplatParams()
    kern = kernels.get(backend)
    to_sensor = (sensor_pose or RigidPose.identity()).inverse()
    res = int(resolution)

    pts = to_sensor.apply(scene.points) if len(scene.points) else np.zeros((0, 3))
    nrm = to_sensor.apply_vectors(scene.normals) if len(scene.points) else np.zeros((0, 3))
    if max_range is not None and len(pts):
        near = np.linalg.norm(pts, axis=1) <= max_range + splat.radius
        pt_ids = np.nonzero(near)[0]
    else:
        pt_ids = np.arange(len(pts))
    opaque = np.array([not scene.materials[m].transparent for m in scene.tri_material], dtype=bool)
    tri_ids_all = np.nonzero(opaque)[0] if len(scene.triangles) else np.zeros(0, dtype=np.int64)
    tris = scene.triangles.reshape(-1, 3, 3)
    tris_s = (tris.reshape(-1, 3) @ to_sensor.rotation.T + to_sensor.translation).reshape(-1, 3, 3)

    depth = np.full((6, res, res), np.inf)
    source = np.full((6, res, res), SKY, dtype=np.int64)
    normal = np.zeros((6, res, res, 3), dtype=np.float32)
    empty = np.ones((6, res, res), dtype=np.uint8)
    r = splat.radius
    for f in range(6):
        basis = FACE_BASES[f]
        d_f, s_f = depth[f], source[f]
        if len(pt_ids):
            p_cam = pts[pt_ids] @ basis.T
            x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
            keep = (z - r > NEAR) & (x - r <= z + r) & (-x - r <= z + r) & (y - r <= z + r) & (
                -y - r <= z + r)
            ids = pt_ids[keep]
            p_cam = np.ascontiguousarray(p_cam[keep])
            n_cam = np.ascontiguousarray(nrm[ids] @ basis.T)
            codes = (-2 - ids).astype(np.int64)
            kern.splat_depth(p_cam, n_cam, codes, r, GRAZE, d_f, s_f)
            nsum = np.zeros((res, res, 3))
            empty[f] = 0
            kern.splat_accumulate(p_cam, n_cam, r, GRAZE, splat.depth_epsilon, d_f, nsum)
            kern.finish_normals(nsum, basis, normal[f], empty[f])
        if len(tri_ids_all):
            t_cam = tris_s[tri_ids_all] @ basis.T
            t_face, t_local = _face_triangles(t_cam)
            kern.raster_triangles(t_face, tri_ids_all[t_local], d_f, s_f)

    tri_normals = np.zeros((len(tris_s), 3))
    if len(tris_s):
        cr = np.cross(tris_s[:, 1] - tris_s[:, 0], tris_s[:, 2] - tris_s[:, 0])
        tri_normals = cr / np.linalg.norm(cr, axis=1, keepdims=True)
        centroid = tris_s.mean(axis=1)
        flip = np.sum(tri_normals * centroid, axis=1) > 0
        tri_normals[flip] *= -1.0

    material = np.full(source.shape, -1, dtype=np.int32)
    instance = np.zeros(source.shape, dtype=np.int32)
    label = np.full(source.shape, -1, dtype=np.int32)
    is_tri = source >= 0
    is_splat = source <= -2
    if is_tri.any():
        t = source[is_tri]
        material[is_tri] = scene.tri_material[t]
        instance[is_tri] = scene.tri_instance[t]
        label[is_tri] = scene.tri_label[t]
        normal[is_tri] = tri_normals[t].astype(np.float32)
    if is_splat.any():
        p = -2 - source[is_splat]
        material[is_splat] = scene.point_material[p]
        label[is_splat] = scene.point_label[p]
        blank = is_splat & (empty == 1)
        if blank.any():
            pb = -2 - source[blank]
            nb = nrm[pb]
            dirs = pts[pb] / np.linalg.norm(pts[pb], axis=1, keepdims=True)
            flip = np.sum(nb * dirs, axis=1) > 0
            nb[flip] *= -1.0
            normal[blank] = nb.astype(np.float32)
    return CubeFaceMaps(res, depth, normal, source, material, instance, label, tris_s,
                        tri_normals, scene.tri_material, scene.tri_instance, scene.tri_label,
                        splat.radius, kern.BACKEND)


@dataclass(eq=False)
class BeamHits:
    hit: np.ndarray
    range: np.ndarray
    normal: np.ndarray
    material: np.ndarray
    instance: np.ndarray
    label: np.ndarray


def _ray_triangle(d: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Möller-Trumbore from the origin; returns t (inf on miss)."""
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    e1, e2 = b - a, c - a
    pvec = np.cross(d, e2)
    det = np.sum(e1 * pvec, axis=1)
    ok = np.abs(det) > 1e-15
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tvec = -a
    u = np.sum(tvec * pvec, axis=1) * inv
    qvec = np.cross(tvec, e1)
    v = np.sum(d * qvec, axis=1) * inv
    t = np.sum(e2 * qvec, axis=1) * inv
    eps = 1e-12
    hit = ok & (u >= -eps) & (v >= -eps) & (u + v <= 1.0 + eps) & (t > 0)
    return np.where(hit, t, np.inf)


def lookup_beams(maps: CubeFaceMaps, directions) -> BeamHits:
    """Resolve beams against the cube maps by nearest-pixel lookup.

    Triangle pixels in the 3x3 neighborhood of the beam's pixel are
    re-tested against the beam itself, so mesh ranges are exact and mesh
    silhouettes are sharp. Splat pixels use the pixel's depth corrected to
    the beam direction through the stored surface plane.
    """
    d = np.asarray(directions, dtype=float).reshape(-1, 3)
    n = len(d)
    res = maps.resolution
    face, col, row = direction_to_face_pixel(d, res)
    src0 = maps.source[face, row, col]

    tri_range = np.full(n, np.inf)
    tri_index = np.full(n, -1, dtype=np.int64)
    if len(maps.triangles):
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                rr = np.clip(row + dr, 0, res - 1)
                cc = np.clip(col + dc, 0, res - 1)
                s = maps.source[face, rr, cc]
                cand = np.nonzero(s >= 0)[0]
                if len(cand) == 0:
                    continue
                t = _ray_triangle(d[cand], maps.triangles[s[cand]])
                better = t < tri_range[cand]
                tri_range[cand[better]] = t[better]
                tri_index[cand[better]] = s[cand][better]

    def splat_range(idx, f, rr, cc):
        depth = maps.depth[f, rr, cc]
        center = face_pixel_to_direction(f, cc, rr, res)
        nrm = maps.normal[f, rr, cc].astype(float)
        dn = np.sum(d[idx] * nrm, axis=1)
        plane = depth * np.sum(center * nrm, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = plane / dn
        ok = (np.abs(dn) > 1e-3) & (np.abs(t - depth) <= 0.05 * depth + maps.splat_radius)
        return np.where(ok, t, depth)

    spl_range = np.full(n, np.inf)
    spl_pix = np.full((n, 3), -1, dtype=np.int64)
    on_splat = np.nonzero(src0 <= -2)[0]
    if len(on_splat):
        spl_range[on_splat] = splat_range(on_splat, face[on_splat], row[on_splat], col[on_splat])
        spl_pix[on_splat] = np.stack([face[on_splat], row[on_splat], col[on_splat]], axis=1)
    # the beam's own pixel shows a triangle the beam misses: fall back to the
    # closest-looking splat pixel around it
    missed = np.nonzero((src0 >= 0) & ~np.isfinite(tri_range))[0]
    if len(missed):
        best_cos = np.full(len(missed), -np.inf)
        best_pix = np.full((len(missed), 3), -1, dtype=np.int64)
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                rr = np.clip(row[missed] + dr, 0, res - 1)
                cc = np.clip(col[missed] + dc, 0, res - 1)
                f = face[missed]
                s = maps.source[f, rr, cc]
                cos = np.sum(face_pixel_to_direction(f, cc, rr, res) * d[missed], axis=1)
                better = (s <= -2) & (cos > best_cos)
                best_cos[better] = cos[better]
                best_pix[better] = np.stack([f, rr, cc], axis=1)[better]
        found = best_pix[:, 0] >= 0
        idx = missed[found]
        bp = best_pix[found]
        if len(idx):
            spl_range[idx] = splat_range(idx, bp[:, 0], bp[:, 1], bp[:, 2])
            spl_pix[idx] = bp

    use_tri = tri_range < spl_range
    use_spl = ~use_tri & np.isfinite(spl_range)
    hit = use_tri | use_spl
    rng = np.where(use_tri, tri_range, np.where(use_spl, spl_range, np.inf))
    normal = np.zeros((n, 3))
    material = np.full(n, -1, dtype=np.int64)
    instance = np.zeros(n, dtype=np.int64)
    label = np.full(n, -1, dtype=np.int64)
    if use_tri.any():
        ti = tri_index[use_tri]
        normal[use_tri] = maps.tri_normals[ti]
        material[use_tri] = maps.tri_material[ti]
        instance[use_tri] = maps.tri_instance[ti]
        label[use_tri] = maps.tri_label[ti]
    if use_spl.any():
        f, rr, cc = spl_pix[use_spl].T
        normal[use_spl] = maps.normal[f, rr, cc]
        material[use_spl] = maps.material[f, rr, cc]
        label[use_spl] = maps.label[f, rr, cc]
    return BeamHits(hit, rng, normal, material, instance, label)

