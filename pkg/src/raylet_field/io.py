"""File formats: PLY clouds, Gaussian PLY, meshes, PFM/PGM maps, cameras JSON and binary checkpoints.

Every reader turns malformed input into :class:`ParseError` (with a byte
offset where one is meaningful); no other exception escapes a parser.
"""

from __future__ import annotations

import functools
import json
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ParseError, RayletError
from .features import FeatureLayout, PerPointFeatures
from .field import BLEND_MODES, Mlp
from .fusion import TriangleMesh, TsdfVolume
from .render import DepthMap, NormalMap
from .scene import Camera, GaussianSet, PointCloud

PathLike = Union[str, os.PathLike]

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_PLY_NAMES = {"i1": "char", "u1": "uchar", "i2": "short", "u2": "ushort", "i4": "int", "u4": "uint", "f4": "float", "f8": "double"}
_MAX_HEADER = 1 << 16

GAUSSIAN_FIELDS = ("opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3")


def _guard(fn):
    """Re-raise any failure inside a parser as ParseError."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ParseError:
            raise
        except (RayletError, ValueError, TypeError, IndexError, KeyError, OverflowError, struct.error, MemoryError) as exc:
            raise ParseError(f"{type(exc).__name__}: {exc}", 0) from None

    return wrapper


def _read_bytes(path: PathLike) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def _write_bytes(path: PathLike, data: bytes):
    with open(path, "wb") as fh:
        fh.write(data)


# ---------------------------------------------------------------- PLY


@dataclass
class PlyProperty:
    name: str
    dtype: str
    count_dtype: Optional[str] = None  # set for list properties

    @property
    def is_list(self) -> bool:
        return self.count_dtype is not None


@dataclass
class PlyElement:
    name: str
    count: int
    properties: List[PlyProperty]
    data: Dict[str, object] = field(default_factory=dict)

    def prop(self, name) -> Optional[PlyProperty]:
        for p in self.properties:
            if p.name == name:
                return p
        return None


@dataclass
class PlyData:
    """Raw PLY content: scalar properties as arrays, list properties as lists of arrays."""

    format: str
    elements: List[PlyElement]
    comments: List[str] = field(default_factory=list)

    def element(self, name) -> Optional[PlyElement]:
        for e in self.elements:
            if e.name == name:
                return e
        return None


def _parse_ply_header(buf: bytes):
    end = buf.find(b"end_header", 0, _MAX_HEADER)
    if not buf.startswith(b"ply"):
        raise ParseError("missing 'ply' magic", 0)
    if end < 0:
        raise ParseError("no end_header within the first 64 KiB", min(len(buf), _MAX_HEADER))
    nl = buf.find(b"\n", end)
    if nl < 0:
        raise ParseError("header not terminated by a newline", end)
    body_start = nl + 1
    fmt = None
    elements: List[PlyElement] = []
    comments = []
    offset = 0
    for raw in buf[:end].split(b"\n"):
        line_off = offset
        offset += len(raw) + 1
        try:
            line = raw.decode("ascii").strip()
        except UnicodeDecodeError:
            raise ParseError("non-ASCII byte in header", line_off) from None
        if not line or line == "ply":
            continue
        words = line.split()
        key = words[0]
        if key in ("comment", "obj_info"):
            comments.append(line[len(key) :].strip())
        elif key == "format":
            if len(words) != 3 or words[2] != "1.0":
                raise ParseError(f"bad format line {line!r}", line_off)
            if words[1] == "binary_big_endian":
                raise ParseError("big-endian PLY is not supported", line_off)
            if words[1] not in ("ascii", "binary_little_endian"):
                raise ParseError(f"unknown PLY format {words[1]!r}", line_off)
            fmt = words[1]
        elif key == "element":
            if len(words) != 3 or not words[2].isdigit():
                raise ParseError(f"bad element line {line!r}", line_off)
            elements.append(PlyElement(words[1], int(words[2]), []))
        elif key == "property":
            if not elements:
                raise ParseError("property before any element", line_off)
            if len(words) == 5 and words[1] == "list":
                if words[2] not in _PLY_TYPES or words[3] not in _PLY_TYPES:
                    raise ParseError(f"unknown list type in {line!r}", line_off)
                if _PLY_TYPES[words[2]][0] == "f":
                    raise ParseError("list count type must be integral", line_off)
                elements[-1].properties.append(PlyProperty(words[4], _PLY_TYPES[words[3]], _PLY_TYPES[words[2]]))
            elif len(words) == 3 and words[1] in _PLY_TYPES:
                if elements[-1].prop(words[2]) is not None:
                    raise ParseError(f"duplicate property {words[2]!r}", line_off)
                elements[-1].properties.append(PlyProperty(words[2], _PLY_TYPES[words[1]]))
            else:
                raise ParseError(f"bad property line {line!r}", line_off)
        else:
            raise ParseError(f"unexpected header keyword {key!r}", line_off)
    if fmt is None:
        raise ParseError("missing format line", 0)
    return fmt, elements, comments, body_start


def _scalar_dtype(el: PlyElement):
    return np.dtype([(p.name, "<" + p.dtype) for p in el.properties])


def _read_binary(buf, pos, el: PlyElement):
    if not any(p.is_list for p in el.properties):
        dt = _scalar_dtype(el)
        need = dt.itemsize * el.count
        if pos + need > len(buf):
            raise ParseError(f"truncated payload in element {el.name!r}", len(buf))
        arr = np.frombuffer(buf, dtype=dt, count=el.count, offset=pos)
        el.data = {p.name: arr[p.name].copy() for p in el.properties}
        return pos + need
    # list elements: try a fixed-count layout first, fall back to a scan
    cols: Dict[str, list] = {p.name: [] for p in el.properties}
    fixed = _fixed_list_layout(buf, pos, el)
    if fixed is not None:
        arr, end = fixed
        for p in el.properties:
            cols[p.name] = arr[p.name].copy() if not p.is_list else arr[p.name + "__items"].copy()
        el.data = cols
        return end
    for i in range(el.count):
        for p in el.properties:
            if p.is_list:
                cdt = np.dtype("<" + p.count_dtype)
                if pos + cdt.itemsize > len(buf):
                    raise ParseError(f"truncated list count in element {el.name!r}", pos)
                n = int(np.frombuffer(buf, cdt, 1, pos)[0])
                pos += cdt.itemsize
                if n < 0:
                    raise ParseError("negative list length", pos - cdt.itemsize)
                idt = np.dtype("<" + p.dtype)
                if pos + n * idt.itemsize > len(buf):
                    raise ParseError(f"truncated list in element {el.name!r}", pos)
                cols[p.name].append(np.frombuffer(buf, idt, n, pos).copy())
                pos += n * idt.itemsize
            else:
                dt = np.dtype("<" + p.dtype)
                if pos + dt.itemsize > len(buf):
                    raise ParseError(f"truncated payload in element {el.name!r}", pos)
                cols[p.name].append(np.frombuffer(buf, dt, 1, pos)[0])
                pos += dt.itemsize
    el.data = {p.name: (cols[p.name] if p.is_list else np.array(cols[p.name], dtype=p.dtype)) for p in el.properties}
    return pos


def _fixed_list_layout(buf, pos, el: PlyElement):
    """Structured view when every list has the same length as the first one."""
    if el.count == 0:
        return None
    fields = []
    probe = pos
    for p in el.properties:
        if p.is_list:
            cdt = np.dtype("<" + p.count_dtype)
            if probe + cdt.itemsize > len(buf):
                return None
            n = int(np.frombuffer(buf, cdt, 1, probe)[0])
            if n < 0 or n > 64:
                return None
            fields += [(p.name + "__n", cdt), (p.name + "__items", "<" + p.dtype, (n,))]
            probe += cdt.itemsize + n * np.dtype("<" + p.dtype).itemsize
        else:
            fields.append((p.name, "<" + p.dtype))
            probe += np.dtype("<" + p.dtype).itemsize
    dt = np.dtype(fields)
    if pos + dt.itemsize * el.count > len(buf):
        return None
    arr = np.frombuffer(buf, dt, el.count, pos)
    for p in el.properties:
        if p.is_list and not np.all(arr[p.name + "__n"] == arr[p.name + "__items"].shape[1]):
            return None
    return arr, pos + dt.itemsize * el.count


def _read_ascii(buf, pos, elements):
    try:
        text = buf[pos:].decode("ascii")
    except UnicodeDecodeError as exc:
        raise ParseError("non-ASCII byte in ASCII payload", pos + exc.start) from None
    lines = text.split("\n")
    li = 0
    line_offsets = np.cumsum([0] + [len(s) + 1 for s in lines]) + pos
    for el in elements:
        cols: Dict[str, list] = {p.name: [] for p in el.properties}
        for _ in range(el.count):
            while li < len(lines) and not lines[li].strip():
                li += 1
            if li >= len(lines):
                raise ParseError(f"truncated payload in element {el.name!r}", len(buf))
            toks = lines[li].split()
            k = 0
            try:
                for p in el.properties:
                    if p.is_list:
                        n = int(toks[k])
                        if n < 0:
                            raise ValueError("negative list length")
                        k += 1
                        items = toks[k : k + n]
                        if len(items) != n:
                            raise ValueError("short list")
                        cols[p.name].append(np.array([_ascii_value(v, p.dtype) for v in items], dtype=p.dtype))
                        k += n
                    else:
                        cols[p.name].append(_ascii_value(toks[k], p.dtype))
                        k += 1
            except (ValueError, IndexError, OverflowError) as exc:
                raise ParseError(f"bad value in element {el.name!r}: {exc}", int(line_offsets[li])) from None
            if k != len(toks):
                raise ParseError(f"extra values in element {el.name!r}", int(line_offsets[li]))
            li += 1
        el.data = {p.name: (cols[p.name] if p.is_list else np.array(cols[p.name], dtype=p.dtype)) for p in el.properties}


def _ascii_value(tok, dtype):
    if dtype[0] == "f":
        return float(tok)
    v = int(tok)
    info = np.iinfo(dtype)
    if not info.min <= v <= info.max:
        raise ValueError(f"{v} out of range for {dtype}")
    return v


@_guard
def read_ply_data(path_or_bytes) -> PlyData:
    buf = path_or_bytes if isinstance(path_or_bytes, (bytes, bytearray)) else _read_bytes(path_or_bytes)
    buf = bytes(buf)
    fmt, elements, comments, pos = _parse_ply_header(buf)
    if fmt == "ascii":
        _read_ascii(buf, pos, elements)
    else:
        for el in elements:
            if el.properties and el.count * min(np.dtype(p.count_dtype or p.dtype).itemsize for p in el.properties) > len(buf):
                raise ParseError(f"element {el.name!r} count exceeds file size", pos)
            pos = _read_binary(buf, pos, el)
    return PlyData(fmt, elements, comments)


def _format_ascii(v, dtype):
    if dtype[0] == "f":
        return repr(float(v)) if dtype == "f8" else repr(float(np.float32(v)))
    return str(int(v))


def ply_bytes(data: PlyData) -> bytes:
    head = ["ply", f"format {data.format} 1.0"]
    head += [f"comment {c}" for c in data.comments]
    for el in data.elements:
        head.append(f"element {el.name} {el.count}")
        for p in el.properties:
            if p.is_list:
                head.append(f"property list {_PLY_NAMES[p.count_dtype]} {_PLY_NAMES[p.dtype]} {p.name}")
            else:
                head.append(f"property {_PLY_NAMES[p.dtype]} {p.name}")
    head.append("end_header")
    out = [("\n".join(head) + "\n").encode("ascii")]
    for el in data.elements:
        if data.format == "ascii":
            rows = []
            for i in range(el.count):
                toks = []
                for p in el.properties:
                    if p.is_list:
                        items = el.data[p.name][i]
                        toks += [str(len(items))] + [_format_ascii(v, p.dtype) for v in items]
                    else:
                        toks.append(_format_ascii(el.data[p.name][i], p.dtype))
                rows.append(" ".join(toks) + "\n")
            out.append("".join(rows).encode("ascii"))
        elif not any(p.is_list for p in el.properties):
            arr = np.empty(el.count, _scalar_dtype(el))
            for p in el.properties:
                arr[p.name] = el.data[p.name]
            out.append(arr.tobytes())
        elif all(not p.is_list or (isinstance(el.data[p.name], np.ndarray) and el.data[p.name].ndim == 2) for p in el.properties):
            fields = []
            for p in el.properties:
                if p.is_list:
                    n = el.data[p.name].shape[1]
                    fields += [(p.name + "__n", "<" + p.count_dtype), (p.name + "__items", "<" + p.dtype, (n,))]
                else:
                    fields.append((p.name, "<" + p.dtype))
            arr = np.empty(el.count, np.dtype(fields))
            for p in el.properties:
                if p.is_list:
                    arr[p.name + "__n"] = el.data[p.name].shape[1]
                    arr[p.name + "__items"] = el.data[p.name]
                else:
                    arr[p.name] = el.data[p.name]
            out.append(arr.tobytes())
        else:
            chunks = []
            for i in range(el.count):
                for p in el.properties:
                    if p.is_list:
                        items = np.asarray(el.data[p.name][i], dtype="<" + p.dtype)
                        chunks.append(np.array([len(items)], "<" + p.count_dtype).tobytes() + items.tobytes())
                    else:
                        chunks.append(np.array([el.data[p.name][i]], "<" + p.dtype).tobytes())
            out.append(b"".join(chunks))
    return b"".join(out)


def write_ply_data(path: PathLike, data: PlyData):
    _write_bytes(path, ply_bytes(data))


def _is_gaussian(vertex: PlyElement) -> bool:
    return all(vertex.prop(n) is not None for n in GAUSSIAN_FIELDS)


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


@_guard
def read_ply(path_or_bytes) -> Union[PointCloud, GaussianSet]:
    """Point cloud, or Gaussian set when the vertex element carries opacity/scale/rotation fields."""
    data = read_ply_data(path_or_bytes)
    vertex = data.element("vertex")
    if vertex is None:
        raise ParseError("no vertex element", 0)
    for n in ("x", "y", "z"):
        p = vertex.prop(n)
        if p is None or p.is_list:
            raise ParseError(f"vertex element lacks scalar property {n!r}", 0)
    if vertex.count == 0:
        raise ParseError("vertex element is empty", 0)
    xyz = np.stack([vertex.data[n].astype(np.float64) for n in ("x", "y", "z")], axis=1)
    if not np.all(np.isfinite(xyz)):
        raise ParseError("non-finite vertex coordinates", 0)
    if _is_gaussian(vertex):
        skip = {"x", "y", "z", *GAUSSIAN_FIELDS}
        extra = [p.name for p in vertex.properties if p.name not in skip and not p.is_list and not p.name.startswith("f_rest_")]
        col = lambda n: vertex.data[n].astype(np.float64)  # noqa: E731
        with np.errstate(over="ignore"):
            scales = np.exp(np.stack([col(f"scale_{i}") for i in range(3)], axis=1))
        quats = np.stack([col(f"rot_{i}") for i in range(4)], axis=1)
        opac = _sigmoid(col("opacity"))
        if not np.all(np.isfinite(scales)) or np.any(scales <= 0):
            raise ParseError("Gaussian scales decode to non-positive or infinite values", 0)
        with np.errstate(over="ignore"):
            qn = np.linalg.norm(quats, axis=1)
        if not np.all(np.isfinite(qn)) or np.any(qn == 0):
            raise ParseError("invalid Gaussian rotation quaternion", 0)
        if not np.all(np.isfinite(opac)):
            raise ParseError("non-finite Gaussian opacity", 0)
        attrs = np.stack([col(n) for n in extra], axis=1) if extra else None
        return GaussianSet(xyz, scales, quats, opac, attrs, tuple(extra))
    extra = [p.name for p in vertex.properties if p.name not in ("x", "y", "z") and not p.is_list]
    attrs = np.stack([vertex.data[n].astype(np.float64) for n in extra], axis=1) if extra else None
    return PointCloud(xyz, attrs, tuple(extra))


def _vertex_element(columns: Dict[str, np.ndarray], dtype: str) -> PlyElement:
    n = len(next(iter(columns.values())))
    props = [PlyProperty(k, dtype) for k in columns]
    return PlyElement("vertex", n, props, {k: np.asarray(v).astype(dtype) for k, v in columns.items()})


def write_ply(path: PathLike, obj: Union[PointCloud, GaussianSet], binary: bool = True, dtype: str = "f8"):
    """Write a cloud (positions and attributes as ``dtype``) or a Gaussian set in the usual 3DGS layout."""
    fmt = "binary_little_endian" if binary else "ascii"
    cols: Dict[str, np.ndarray] = {}
    if isinstance(obj, GaussianSet):
        for i, n in enumerate("xyz"):
            cols[n] = obj.means[:, i]
        o = np.clip(obj.opacities, 1e-12, 1 - 1e-12)
        cols["opacity"] = np.log(o / (1 - o))
        for i in range(3):
            cols[f"scale_{i}"] = np.log(obj.scales[:, i])
        for i in range(4):
            cols[f"rot_{i}"] = obj.rotations[:, i]
    else:
        for i, n in enumerate("xyz"):
            cols[n] = obj.positions[:, i]
    if obj.attributes is not None:
        for i, n in enumerate(obj.attribute_names):
            cols[n] = obj.attributes[:, i]
    write_ply_data(path, PlyData(fmt, [_vertex_element(cols, dtype)]))


@_guard
def read_mesh(path: PathLike) -> TriangleMesh:
    """Triangle mesh from PLY (vertex + face) or Wavefront OBJ; polygons are fan-triangulated."""
    if str(path).lower().endswith(".obj"):
        return read_obj(path)
    data = read_ply_data(path)
    vertex, face = data.element("vertex"), data.element("face")
    if vertex is None or face is None:
        raise ParseError("mesh PLY needs vertex and face elements", 0)
    if any(vertex.prop(n) is None or vertex.prop(n).is_list for n in ("x", "y", "z")):
        raise ParseError("vertex element lacks x/y/z", 0)
    v = np.stack([vertex.data[n].astype(np.float64) for n in ("x", "y", "z")], axis=1)
    normals = None
    if all(vertex.prop(n) is not None and not vertex.prop(n).is_list for n in ("nx", "ny", "nz")):
        normals = np.stack([vertex.data[n].astype(np.float64) for n in ("nx", "ny", "nz")], axis=1)
    lp = next((p for p in face.properties if p.is_list and p.name in ("vertex_indices", "vertex_index")), None)
    if lp is None:
        raise ParseError("face element lacks a vertex_indices list", 0)
    tris = _fan(face.data[lp.name])
    if len(tris) and (tris.min() < 0 or tris.max() >= len(v)):
        raise ParseError("face index out of range", 0)
    return TriangleMesh(v, tris, normals)


def _fan(polys) -> np.ndarray:
    if isinstance(polys, np.ndarray) and polys.ndim == 2 and polys.shape[1] == 3:
        return polys.astype(np.int64)
    out = []
    for poly in polys:
        poly = np.asarray(poly, dtype=np.int64)
        if len(poly) < 3:
            raise ParseError("face with fewer than three vertices", 0)
        for k in range(1, len(poly) - 1):
            out.append((poly[0], poly[k], poly[k + 1]))
    return np.array(out, dtype=np.int64).reshape(-1, 3)


def write_mesh_ply(path: PathLike, mesh: TriangleMesh, binary: bool = True):
    cols = {n: mesh.vertices[:, i] for i, n in enumerate("xyz")}
    if mesh.normals is not None:
        cols.update({n: mesh.normals[:, i] for i, n in enumerate(("nx", "ny", "nz"))})
    vertex = _vertex_element(cols, "f8")
    face = PlyElement("face", len(mesh.triangles), [PlyProperty("vertex_indices", "i4", "u1")],
                      {"vertex_indices": mesh.triangles.astype(np.int32)})
    write_ply_data(path, PlyData("binary_little_endian" if binary else "ascii", [vertex, face]))


def write_obj(path: PathLike, mesh: TriangleMesh):
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    if mesh.normals is not None:
        lines += [f"vn {x!r} {y!r} {z!r}" for x, y, z in mesh.normals.tolist()]
        lines += [f"f {a}//{a} {b}//{b} {c}//{c}" for a, b, c in (mesh.triangles + 1).tolist()]
    else:
        lines += [f"f {a} {b} {c}" for a, b, c in (mesh.triangles + 1).tolist()]
    _write_bytes(path, ("\n".join(lines) + "\n").encode("ascii"))


@_guard
def read_obj(path: PathLike) -> TriangleMesh:
    buf = _read_bytes(path)
    verts, norms, faces = [], [], []
    offset = 0
    for raw in buf.split(b"\n"):
        here = offset
        offset += len(raw) + 1
        try:
            words = raw.decode("ascii").split()
            if not words or words[0].startswith("#"):
                continue
            if words[0] == "v":
                verts.append([float(w) for w in words[1:4]])
                if len(verts[-1]) != 3:
                    raise ValueError("vertex needs three coordinates")
            elif words[0] == "vn":
                norms.append([float(w) for w in words[1:4]])
                if len(norms[-1]) != 3:
                    raise ValueError("normal needs three components")
            elif words[0] == "f":
                idx = [int(w.split("/")[0]) for w in words[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                faces.append(idx)
        except (UnicodeDecodeError, ValueError) as exc:
            raise ParseError(f"bad OBJ line: {exc}", here) from None
    tris = _fan(faces) if faces else np.zeros((0, 3), np.int64)
    v = np.array(verts, dtype=np.float64).reshape(-1, 3)
    if len(tris) and (tris.min() < 0 or tris.max() >= len(v)):
        raise ParseError("face index out of range", 0)
    n = np.array(norms, dtype=np.float64).reshape(-1, 3) if len(norms) == len(verts) and norms else None
    return TriangleMesh(v, tris, n)


def write_mesh(path: PathLike, mesh: TriangleMesh, binary: bool = False):
    """OBJ when the suffix is ``.obj``, otherwise PLY (ASCII unless ``binary``)."""
    if str(path).lower().endswith(".obj"):
        write_obj(path, mesh)
    else:
        write_mesh_ply(path, mesh, binary)


# ---------------------------------------------------------------- PFM / PGM


def pfm_bytes(image: np.ndarray) -> bytes:
    img = np.asarray(image, dtype="<f4")
    if img.ndim == 2:
        magic = b"Pf"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"PF"
    else:
        raise RayletError("PFM images are (H, W) or (H, W, 3)")
    H, W = img.shape[:2]
    header = magic + b"\n" + f"{W} {H}\n-1.0\n".encode("ascii")
    return header + np.ascontiguousarray(img[::-1]).tobytes()


@_guard
def parse_pfm(buf: bytes) -> np.ndarray:
    """Little-endian PFM payload as a top-down float32 array."""
    parts = []
    pos = 0
    for _ in range(3):
        nl = buf.find(b"\n", pos, pos + 256)
        if nl < 0:
            raise ParseError("truncated PFM header", pos)
        parts.append((buf[pos:nl], pos))
        pos = nl + 1
    magic, _ = parts[0]
    if magic.strip() == b"Pf":
        channels = 1
    elif magic.strip() == b"PF":
        channels = 3
    else:
        raise ParseError(f"bad PFM magic {magic[:8]!r}", 0)
    try:
        dims = parts[1][0].decode("ascii").split()
        W, H = int(dims[0]), int(dims[1])
        if len(dims) != 2:
            raise ValueError
    except (UnicodeDecodeError, ValueError, IndexError):
        raise ParseError("bad PFM dimensions line", parts[1][1]) from None
    if W <= 0 or H <= 0:
        raise ParseError("PFM dimensions must be positive", parts[1][1])
    try:
        scale = float(parts[2][0].decode("ascii"))
    except (UnicodeDecodeError, ValueError):
        raise ParseError("bad PFM scale line", parts[2][1]) from None
    if not scale < 0:
        raise ParseError("big-endian PFM (positive scale) is not supported; expected a negative scale", parts[2][1])
    need = W * H * channels * 4
    if len(buf) - pos != need:
        raise ParseError(f"PFM payload is {len(buf) - pos} bytes, expected {need}", pos)
    arr = np.frombuffer(buf, "<f4", W * H * channels, pos)
    arr = arr.reshape((H, W) if channels == 1 else (H, W, 3))
    return arr[::-1].copy()


def write_pfm(path: PathLike, data):
    """Write a DepthMap, NormalMap or raw array; invalid pixels are stored as 0."""
    if isinstance(data, DepthMap):
        img = np.where(data.valid, data.values, 0.0)
    elif isinstance(data, NormalMap):
        img = np.where(data.valid[..., None], data.normals, 0.0)
    else:
        img = np.asarray(data)
    _write_bytes(path, pfm_bytes(img))


@_guard
def read_pfm(path_or_bytes) -> Union[DepthMap, NormalMap]:
    buf = path_or_bytes if isinstance(path_or_bytes, (bytes, bytearray)) else _read_bytes(path_or_bytes)
    img = parse_pfm(bytes(buf))
    if img.ndim == 2:
        valid = np.isfinite(img) & (img != 0)
        return DepthMap(np.where(valid, img, 0.0).astype(np.float64), valid)
    valid = np.all(np.isfinite(img), axis=-1) & np.any(img != 0, axis=-1)
    return NormalMap(np.where(valid[..., None], img, 0.0).astype(np.float64), valid)


def write_pgm16(path: PathLike, depth: DepthMap, units_per_meter: float = 1000.0):
    """16-bit preview: millimetres by default, 0 for invalid pixels, saturating at 65535."""
    q = np.clip(np.round(depth.values * units_per_meter), 0, 65535)
    q = np.where(depth.valid, q, 0).astype(">u2")
    header = f"P5\n{depth.width} {depth.height}\n65535\n".encode("ascii")
    _write_bytes(path, header + q.tobytes())


# ---------------------------------------------------------------- cameras


CAMERA_KEYS = ("fx", "fy", "cx", "cy", "width", "height", "world_from_camera")


def camera_to_dict(cam: Camera) -> dict:
    return {
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "width": cam.width, "height": cam.height,
        "world_from_camera": [float(v) for v in cam.world_from_camera.reshape(-1)],
    }


@_guard
def camera_from_dict(d) -> Camera:
    if not isinstance(d, dict):
        raise ParseError("camera must be a JSON object", 0)
    missing = [k for k in CAMERA_KEYS if k not in d]
    if missing:
        raise ParseError(f"camera is missing {missing}", 0)
    M = d["world_from_camera"]
    if not isinstance(M, list) or len(M) != 16 or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in M):
        raise ParseError("world_from_camera must be 16 numbers (row-major 4x4)", 0)
    for k in ("fx", "fy", "cx", "cy", "width", "height"):
        if not isinstance(d[k], (int, float)) or isinstance(d[k], bool) or not np.isfinite(d[k]):
            raise ParseError(f"camera field {k!r} must be a finite number", 0)
    if int(d["width"]) != d["width"] or int(d["height"]) != d["height"]:
        raise ParseError("camera width/height must be integers", 0)
    M = np.array(M, dtype=np.float64).reshape(4, 4)
    if not np.all(np.isfinite(M)) or not np.allclose(M[3], [0, 0, 0, 1]):
        raise ParseError("world_from_camera must be a finite rigid transform", 0)
    try:
        return Camera.from_matrix(d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"]), M)
    except RayletError as exc:
        raise ParseError(f"invalid camera: {exc}", 0) from None


def _load_json(path_or_text):
    if isinstance(path_or_text, (bytes, bytearray)):
        text = path_or_text
    else:
        text = _read_bytes(path_or_text)
    try:
        return json.loads(text)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(f"invalid JSON: {exc}", getattr(exc, "pos", 0) or 0) from None
    except RecursionError:
        raise ParseError("JSON nesting too deep", 0) from None


def write_camera(path: PathLike, cam: Camera):
    _write_bytes(path, (json.dumps(camera_to_dict(cam), indent=2) + "\n").encode("utf-8"))


@_guard
def read_camera(path_or_bytes) -> Camera:
    return camera_from_dict(_load_json(path_or_bytes))


def write_json(path: PathLike, obj):
    _write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))


@_guard
def read_json(path_or_bytes):
    return _load_json(path_or_bytes)


# ---------------------------------------------------------------- binary checkpoints

EMBED_MAGIC = b"RLDF-F"
WEIGHT_MAGIC = b"RLDF-W"
VOLUME_MAGIC = b"RLDF-V"
FORMAT_VERSION = 1


def _check_magic(buf, magic):
    if not buf.startswith(magic):
        raise ParseError(f"bad magic, expected {magic.decode()}", 0)


def _unpack(fmt, buf, pos):
    size = struct.calcsize(fmt)
    if pos + size > len(buf):
        raise ParseError("truncated header", len(buf))
    return struct.unpack_from(fmt, buf, pos), pos + size


def embeddings_bytes(values: np.ndarray) -> bytes:
    v = np.asarray(values, dtype="<f4")
    if v.ndim != 2:
        raise RayletError("embeddings must be an N x C matrix")
    return EMBED_MAGIC + struct.pack("<IQI", FORMAT_VERSION, v.shape[0], v.shape[1]) + v.tobytes()


@_guard
def parse_embeddings(buf: bytes) -> np.ndarray:
    _check_magic(buf, EMBED_MAGIC)
    (version, N, C), pos = _unpack("<IQI", buf, len(EMBED_MAGIC))
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported embedding version {version}", len(EMBED_MAGIC))
    if len(buf) - pos != N * C * 4:
        raise ParseError(f"embedding payload is {len(buf) - pos} bytes, expected {N * C * 4}", pos)
    return np.frombuffer(buf, "<f4", N * C, pos).reshape(N, C).copy()


def write_embeddings(path: PathLike, values):
    _write_bytes(path, embeddings_bytes(values))


@_guard
def read_embeddings(path_or_bytes) -> PerPointFeatures:
    buf = path_or_bytes if isinstance(path_or_bytes, (bytes, bytearray)) else _read_bytes(path_or_bytes)
    return PerPointFeatures.loaded(parse_embeddings(bytes(buf)))


@dataclass
class WeightHeader:
    in_dim: int
    hidden: int
    layers: int
    C: int
    K: int
    blend: str


def weights_bytes(mlp: Mlp, C: int, K: int, blend: str) -> bytes:
    head = WEIGHT_MAGIC + struct.pack(
        "<IIIIIIB", FORMAT_VERSION, mlp.in_dim, mlp.hidden, mlp.n_hidden_layers, C, K, BLEND_MODES.index(blend)
    )
    return head + b"".join(np.asarray(p, dtype="<f4").tobytes() for p in mlp.params)


@_guard
def parse_weights(buf: bytes) -> Tuple[WeightHeader, Mlp]:
    _check_magic(buf, WEIGHT_MAGIC)
    (version, in_dim, hidden, layers, C, K, mode), pos = _unpack("<IIIIIIB", buf, len(WEIGHT_MAGIC))
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported weight version {version}", len(WEIGHT_MAGIC))
    if mode >= len(BLEND_MODES):
        raise ParseError(f"unknown blend mode code {mode}", pos - 1)
    if in_dim == 0 or hidden == 0:
        raise ParseError("network widths must be positive", len(WEIGHT_MAGIC) + 4)
    shapes = [(in_dim, hidden)] + [(hidden, hidden)] * layers + [(hidden, 2)]
    need = sum((a * b + b) * 4 for a, b in shapes)
    if len(buf) - pos != need:
        raise ParseError(f"weight payload is {len(buf) - pos} bytes, expected {need}", pos)
    weights, biases = [], []
    for a, b in shapes:
        weights.append(np.frombuffer(buf, "<f4", a * b, pos).reshape(a, b).astype(np.float32))
        pos += a * b * 4
        biases.append(np.frombuffer(buf, "<f4", b, pos).astype(np.float32))
        pos += b * 4
    return WeightHeader(in_dim, hidden, layers, C, K, BLEND_MODES[mode]), Mlp(weights, biases)


def write_weights(path: PathLike, mlp: Mlp, layout: FeatureLayout, blend: str):
    _write_bytes(path, weights_bytes(mlp, layout.C, layout.K, blend))


@_guard
def read_weights(path_or_bytes) -> Tuple[WeightHeader, Mlp]:
    buf = path_or_bytes if isinstance(path_or_bytes, (bytes, bytearray)) else _read_bytes(path_or_bytes)
    return parse_weights(bytes(buf))


def volume_bytes(vol: TsdfVolume) -> bytes:
    head = VOLUME_MAGIC + struct.pack("<I3I3ddd", FORMAT_VERSION, *vol.dims, *vol.origin, vol.voxel_size, vol.truncation)
    return head + vol.tsdf.astype("<f4").tobytes() + vol.weight.astype("<f4").tobytes()


@_guard
def parse_volume(buf: bytes) -> TsdfVolume:
    _check_magic(buf, VOLUME_MAGIC)
    vals, pos = _unpack("<I3I3ddd", buf, len(VOLUME_MAGIC))
    version, dims, origin, voxel, trunc = vals[0], vals[1:4], vals[4:7], vals[7], vals[8]
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported volume version {version}", len(VOLUME_MAGIC))
    n = int(np.prod(dims, dtype=np.int64))
    if n == 0 or not (voxel > 0 and trunc > 0) or not np.all(np.isfinite(origin)):
        raise ParseError("invalid volume geometry", len(VOLUME_MAGIC))
    if len(buf) - pos != 8 * n:
        raise ParseError(f"volume payload is {len(buf) - pos} bytes, expected {8 * n}", pos)
    tsdf = np.frombuffer(buf, "<f4", n, pos).reshape(dims).astype(np.float64)
    weight = np.frombuffer(buf, "<f4", n, pos + 4 * n).reshape(dims).astype(np.float64)
    return TsdfVolume(np.array(origin), voxel, dims, trunc, tsdf, weight)


def write_volume(path: PathLike, vol: TsdfVolume):
    _write_bytes(path, volume_bytes(vol))


@_guard
def read_volume(path_or_bytes) -> TsdfVolume:
    buf = path_or_bytes if isinstance(path_or_bytes, (bytes, bytearray)) else _read_bytes(path_or_bytes)
    return parse_volume(bytes(buf))


# ---------------------------------------------------------------- CSV


def write_csv(path: PathLike, headers: Sequence[str], rows: Sequence[Sequence]):
    lines = [",".join(headers)]
    for r in rows:
        lines.append(",".join(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v) for v in r))
    _write_bytes(path, ("\n".join(lines) + "\n").encode("ascii"))


def write_loss_csv(path: PathLike, trace: Sequence[Tuple[int, float]]):
    write_csv(path, ("step", "loss"), [(s, float(l)) for s, l in trace])
