"""PLY / PCD point-cloud I/O and Wavefront OBJ mesh loading.

PLY (ASCII or binary little-endian) is the canonical interchange format.
Coordinates are written as 32-bit floats and labels as 32-bit unsigned
integers; the class table travels in a ``comment classes`` header line.
"""

from __future__ import annotations

import logging
import os
import re
from pathlib import Path

import numpy as np

from .cloud import ClassTable, SemanticPointCloud
from .geometry import TriangleMesh

LOGGER = logging.getLogger(__name__)

FRAME_NOTE = "frame right-handed z-up meters"


class PointCloudFormatError(ValueError):
    """Base for parse failures; ``offset`` is the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class MalformedHeader(PointCloudFormatError):
    pass


class MalformedPayload(PointCloudFormatError):
    pass


class TruncatedPayload(PointCloudFormatError):
    pass


class UnsupportedEncoding(PointCloudFormatError):
    pass


class EmptyCloud(ValueError):
    pass


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}

_PCD_TYPES = {("F", 4): "f4", ("F", 8): "f8", ("U", 1): "u1", ("U", 2): "u2", ("U", 4): "u4",
              ("I", 1): "i1", ("I", 2): "i2", ("I", 4): "i4", ("U", 8): "u8", ("I", 8): "i8"}


def _detect_format(path: Path, fmt: str | None) -> str:
    if fmt:
        fmt = fmt.lower()
    else:
        fmt = path.suffix.lower().lstrip(".")
    if fmt not in ("ply", "pcd"):
        raise ValueError(f"unsupported point cloud format {fmt!r}")
    return fmt


def _split_header(data: bytes, terminator: re.Pattern, kind: str) -> tuple[list[str], int]:
    match = terminator.search(data)
    if match is None:
        raise MalformedHeader(f"{kind} header has no terminator", len(data))
    end = match.end()
    try:
        text = data[:end].decode("ascii")
    except UnicodeDecodeError as exc:
        raise MalformedHeader(f"non-ASCII bytes in {kind} header", exc.start) from None
    return text.splitlines(), end


def _line_offsets(lines: list[str]) -> list[int]:
    offsets, pos = [], 0
    for line in lines:
        offsets.append(pos)
        pos += len(line) + 1
    return offsets


def _parse_ascii_body(body: bytes, base: int, dtype: np.dtype, count: int) -> np.ndarray:
    text = body.decode("ascii", errors="replace")
    lines = text.split("\n")
    rows, pos = [], base
    width = len(dtype.names)
    for line in lines:
        if len(rows) == count:
            break
        stripped = line.strip()
        if stripped:
            toks = stripped.split()
            if len(toks) != width:
                raise MalformedPayload(f"expected {width} values, found {len(toks)}", pos)
            rows.append(toks)
        pos += len(line.encode("ascii", errors="replace")) + 1
    if len(rows) < count:
        raise TruncatedPayload(f"header declares {count} points, body has {len(rows)}",
                               base + len(body))
    out = np.empty(count, dtype=dtype)
    if count:
        try:
            values = np.array(rows, dtype=float)
        except ValueError:
            raise MalformedPayload("non-numeric value in body", base) from None
        for i, name in enumerate(dtype.names):
            out[name] = values[:, i]
    return out


def _parse_binary_body(body: bytes, base: int, dtype: np.dtype, count: int) -> np.ndarray:
    need = dtype.itemsize * count
    if len(body) < need:
        raise TruncatedPayload(
            f"header declares {count} points ({need} bytes), body has {len(body)} bytes",
            base + len(body),
        )
    return np.frombuffer(body[:need], dtype=dtype, count=count)


def _cloud_from_records(records: np.ndarray, classes: ClassTable) -> SemanticPointCloud:
    names = records.dtype.names
    if not {"x", "y", "z"} <= set(names):
        raise MalformedHeader("x, y and z fields are required", 0)
    pts = np.stack([records["x"], records["y"], records["z"]], axis=1).astype(float)
    labels = records["label"].astype(np.uint32) if "label" in names else None
    mats = records["material"].astype(np.uint32) if "material" in names else None
    normals = None
    if {"nx", "ny", "nz"} <= set(names):
        normals = np.stack([records["nx"], records["ny"], records["nz"]], axis=1).astype(float)
    return SemanticPointCloud(pts, labels, mats, normals, classes, has_labels=labels is not None)


def _read_ply(data: bytes) -> SemanticPointCloud:
    if not data.startswith(b"ply"):
        raise MalformedHeader("missing 'ply' magic", 0)
    lines, end = _split_header(data, re.compile(rb"end_header\r?\n"), "PLY")
    offsets = _line_offsets(lines)
    encoding = None
    classes = ClassTable()
    elements: list[tuple[str, int, list[tuple[str, str]]]] = []
    for line, off in zip(lines[1:], offsets[1:]):
        toks = line.split()
        if not toks or toks[0] == "end_header":
            continue
        key = toks[0]
        if key == "format":
            if len(toks) != 3:
                raise MalformedHeader(f"bad format line {line!r}", off)
            encoding = toks[1]
        elif key in ("comment", "obj_info"):
            if len(toks) > 1 and toks[1] == "classes":
                try:
                    classes = ClassTable.decode(" ".join(toks[2:]))
                except (ValueError, IndexError) as exc:
                    raise MalformedHeader(f"bad class table: {exc}", off) from None
        elif key == "element":
            if len(toks) != 3 or not toks[2].isdigit():
                raise MalformedHeader(f"bad element line {line!r}", off)
            elements.append((toks[1], int(toks[2]), []))
        elif key == "property":
            if not elements:
                raise MalformedHeader("property before any element", off)
            if len(toks) >= 2 and toks[1] == "list":
                elements[-1][2].append(("list", toks[-1]))
                continue
            if len(toks) != 3 or toks[1] not in _PLY_TYPES:
                raise MalformedHeader(f"bad property line {line!r}", off)
            elements[-1][2].append((toks[1], toks[2]))
        else:
            raise MalformedHeader(f"unexpected header keyword {key!r}", off)
    if encoding is None:
        raise MalformedHeader("missing format line", offsets[0])
    if encoding not in ("ascii", "binary_little_endian"):
        raise UnsupportedEncoding(f"PLY encoding {encoding!r} not supported", offsets[1])
    if not elements or elements[0][0] != "vertex":
        raise UnsupportedEncoding("vertex must be the first PLY element", end)
    _, count, props = elements[0]
    if any(t == "list" for t, _ in props):
        raise UnsupportedEncoding("list properties on vertices are not supported", end)
    prefix = "<" if encoding != "ascii" else "="
    dtype = np.dtype([(name, prefix + _PLY_TYPES[t]) for t, name in props])
    body = data[end:]
    if encoding == "ascii":
        records = _parse_ascii_body(body, end, dtype, count)
    else:
        records = _parse_binary_body(body, end, dtype, count)
    return _cloud_from_records(records, classes)


def _read_pcd(data: bytes) -> SemanticPointCloud:
    lines, end = _split_header(data, re.compile(rb"DATA[ \t]+\S+[ \t]*\r?\n"), "PCD")
    offsets = _line_offsets(lines)
    header: dict[str, list[str]] = {}
    classes = ClassTable()
    for line, off in zip(lines, offsets):
        toks = line.split()
        if not toks:
            continue
        if toks[0].startswith("#"):
            if len(toks) > 2 and toks[1] == "classes":
                try:
                    classes = ClassTable.decode(" ".join(toks[2:]))
                except (ValueError, IndexError) as exc:
                    raise MalformedHeader(f"bad class table: {exc}", off) from None
            continue
        header[toks[0].upper()] = toks[1:]
        header.setdefault("_offset_" + toks[0].upper(), [str(off)])
    for key in ("FIELDS", "SIZE", "TYPE", "POINTS", "DATA"):
        if key not in header:
            raise MalformedHeader(f"missing {key} line", end)
    fields, sizes, types = header["FIELDS"], header["SIZE"], header["TYPE"]
    counts = header.get("COUNT", ["1"] * len(fields))
    if not (len(fields) == len(sizes) == len(types) == len(counts)):
        raise MalformedHeader("FIELDS/SIZE/TYPE/COUNT lengths differ",
                              int(header["_offset_FIELDS"][0]))
    if any(c != "1" for c in counts):
        raise UnsupportedEncoding("PCD fields with COUNT > 1 are not supported",
                                  int(header.get("_offset_COUNT", ["0"])[0]))
    try:
        count = int(header["POINTS"][0])
        dtype_fields = [(f, "<" + _PCD_TYPES[(t, int(s))]) for f, s, t in zip(fields, sizes, types)]
    except (KeyError, ValueError, IndexError):
        raise MalformedHeader("bad POINTS, SIZE or TYPE value",
                              int(header["_offset_SIZE"][0])) from None
    mode = header["DATA"][0].lower()
    if mode == "ascii":
        dtype = np.dtype([(f, t.replace("<", "=")) for f, t in dtype_fields])
        records = _parse_ascii_body(data[end:], end, dtype, count)
    elif mode == "binary":
        records = _parse_binary_body(data[end:], end, np.dtype(dtype_fields), count)
    else:
        raise UnsupportedEncoding(f"PCD DATA {mode!r} not supported", end - len(lines[-1]) - 1)
    return _cloud_from_records(records, classes)


def read_point_cloud(path, fmt: str | None = None) -> SemanticPointCloud:
    """Read a PLY or PCD file. ``fmt`` defaults to the file suffix."""
    path = Path(path)
    fmt = _detect_format(path, fmt)
    data = path.read_bytes()
    cloud = _read_ply(data) if fmt == "ply" else _read_pcd(data)
    LOGGER.debug("read %d points from %s", len(cloud), path)
    return cloud


def _record_array(cloud: SemanticPointCloud, byteorder: str) -> np.ndarray:
    fields = [("x", "f4"), ("y", "f4"), ("z", "f4")]
    if cloud.has_labels:
        fields.append(("label", "u4"))
    if cloud.materials is not None:
        fields.append(("material", "u4"))
    if cloud.normals is not None:
        fields += [("nx", "f4"), ("ny", "f4"), ("nz", "f4")]
    rec = np.empty(len(cloud), dtype=[(n, byteorder + t) for n, t in fields])
    rec["x"], rec["y"], rec["z"] = cloud.points.T
    if cloud.has_labels:
        rec["label"] = cloud.labels
    if cloud.materials is not None:
        rec["material"] = cloud.materials
    if cloud.normals is not None:
        rec["nx"], rec["ny"], rec["nz"] = cloud.normals.T
    return rec


def _ascii_rows(rec: np.ndarray) -> bytes:
    cols = []
    for name in rec.dtype.names:
        col = rec[name]
        if col.dtype.kind == "f":
            cols.append([f"{v:.9g}" for v in col.tolist()])
        else:
            cols.append([str(v) for v in col.tolist()])
    return "".join(" ".join(row) + "\n" for row in zip(*cols)).encode("ascii")


def _atomic_write(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def write_point_cloud(cloud: SemanticPointCloud, path, fmt: str | None = None,
                      binary: bool = True) -> None:
    """Write ``cloud`` as PLY or PCD; binary little-endian unless ``binary=False``."""
    if len(cloud) == 0:
        raise EmptyCloud("refusing to write an empty point cloud")
    path = Path(path)
    fmt = _detect_format(path, fmt)
    rec = _record_array(cloud, "<" if binary else "=")
    body = rec.tobytes() if binary else _ascii_rows(rec)
    if fmt == "ply":
        lines = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
                 f"comment {FRAME_NOTE}", f"comment classes {cloud.classes.encode()}",
                 f"element vertex {len(cloud)}"]
        ply_names = {"f4": "float", "u4": "uint"}
        for name in rec.dtype.names:
            lines.append(f"property {ply_names[rec.dtype[name].str[1:]]} {name}")
        lines.append("end_header")
    else:
        names = rec.dtype.names
        lines = ["# .PCD v0.7 - Point Cloud Data file format", f"# {FRAME_NOTE}",
                 f"# classes {cloud.classes.encode()}", "VERSION 0.7",
                 "FIELDS " + " ".join(names), "SIZE " + " ".join("4" for _ in names),
                 "TYPE " + " ".join("F" if rec.dtype[n].kind == "f" else "U" for n in names),
                 "COUNT " + " ".join("1" for _ in names), f"WIDTH {len(cloud)}", "HEIGHT 1",
                 "VIEWPOINT 0 0 0 1 0 0 0", f"POINTS {len(cloud)}",
                 f"DATA {'binary' if binary else 'ascii'}"]
    header = ("\n".join(lines) + "\n").encode("ascii")
    _atomic_write(path, header + body)


def read_obj(path, material_ids: dict[str, int] | None = None) -> tuple[TriangleMesh, list[str]]:
    """Load a Wavefront OBJ as a triangle mesh.

    Polygons are fan-triangulated. Each triangle takes the ID of the active
    ``usemtl`` name, or of the active ``g`` group when the file has no
    ``usemtl``. IDs come from ``material_ids`` when given, otherwise in order
    of first appearance. Returns the mesh and the ID-ordered name list.
    """
    path = Path(path)
    text = path.read_text()
    uses_mtl = re.search(r"^\s*usemtl\s", text, flags=re.M) is not None
    names: list[str] = []
    mapping = dict(material_ids or {})
    verts, tris, mats = [], [], []
    current = "default"

    def material_id(name):
        if name not in mapping:
            if material_ids is not None:
                raise KeyError(f"{path}: material {name!r} not in material table")
            mapping[name] = len(mapping)
        if name not in names:
            names.append(name)
        return mapping[name]

    for lineno, line in enumerate(text.splitlines(), 1):
        toks = line.split()
        if not toks or toks[0].startswith("#"):
            continue
        if toks[0] == "v":
            verts.append([float(t) for t in toks[1:4]])
        elif toks[0] == "f":
            idx = []
            for tok in toks[1:]:
                i = int(tok.split("/")[0])
                idx.append(i - 1 if i > 0 else len(verts) + i)
            if len(idx) < 3:
                raise ValueError(f"{path}:{lineno}: face with fewer than 3 vertices")
            mid = material_id(current)
            for k in range(1, len(idx) - 1):
                tris.append([idx[0], idx[k], idx[k + 1]])
                mats.append(mid)
        elif toks[0] == "usemtl" or (toks[0] == "g" and not uses_mtl):
            current = toks[1] if len(toks) > 1 else "default"
    mesh = TriangleMesh(np.array(verts, dtype=float).reshape(-1, 3),
                        np.array(tris, dtype=np.int64).reshape(-1, 3), np.array(mats))
    if mesh.dropped_degenerate:
        LOGGER.warning("%s: dropped %d degenerate triangles", path, mesh.dropped_degenerate)
    ordered = sorted(mapping, key=mapping.get)
    return mesh, ordered


def write_obj(mesh: TriangleMesh, path, material_names: list[str] | None = None) -> None:
    names = material_names or [f"mat{i}" for i in range(int(mesh.materials.max(initial=0)) + 1)]
    out = ["# auglidar mesh"]
    out += [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    current = None
    for tri, mid in zip(mesh.triangles, mesh.materials):
        if mid != current:
            out.append(f"usemtl {names[mid]}")
            current = mid
        out.append("f " + " ".join(str(i + 1) for i in tri))
    _atomic_write(Path(path), ("\n".join(out) + "\n").encode("ascii"))
