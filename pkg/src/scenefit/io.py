"""Serialization for motions, transforms, clouds and meshes.

Motion JSON::

    {"T": [[x, y, z], ...], "theta": [[[ax, ay, az] x 24], ...], "beta": [10 floats],
     "frame_rate": 30.0, "frame": "WORLD"}

Transform JSON::

    {"matrix": [[4 floats] x 4], "source_frame": "LIDAR", "target_frame": "WORLD"}

Clouds and meshes use PLY (ascii or binary_little_endian) with a ``vertex`` element
(x, y, z and optionally nx, ny, nz) and a ``face`` element (list of vertex_indices).
Cloud metadata (timestamp, frame, label) travels in PLY ``comment`` lines.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .core import (
    CloudLabel,
    CoordinateFrame,
    MotionSequence,
    PointCloudFrame,
    RigidTransform,
    SceneMesh,
    ValidationError,
)


class ParseError(ValidationError):
    """Malformed input. Carries the byte offset and the field path that failed."""

    def __init__(self, message: str, field: str = "", offset: int | None = None):
        self.field = field
        self.offset = offset
        where = []
        if field:
            where.append(f"field '{field}'")
        if offset is not None:
            where.append(f"byte {offset}")
        super().__init__(f"{message}" + (f" ({', '.join(where)})" if where else ""))


def _dumps(obj) -> str:
    # repr-exact floats; json uses repr for floats so round-trips are bit-exact
    return json.dumps(obj, indent=None, separators=(",", ":"), sort_keys=True) + "\n"


def _loads(text: str | bytes):
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as e:
            raise ParseError(f"not valid UTF-8: {e.reason}", offset=e.start) from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON: {e.msg}", offset=len(text[: e.pos].encode("utf-8"))) from None


def _field(doc: dict, key: str, path: str = ""):
    if not isinstance(doc, dict) or key not in doc:
        raise ParseError("missing required field", field=f"{path}{key}")
    return doc[key]


def _array(value, shape_tail: tuple, name: str, dtype=float) -> np.ndarray:
    try:
        a = np.array(value, dtype=dtype)
    except (TypeError, ValueError):
        raise ParseError("ragged or non-numeric array", field=name) from None
    if a.ndim != len(shape_tail) or any(t is not None and s != t for s, t in zip(a.shape, shape_tail)):
        raise ParseError(f"bad shape {a.shape}", field=name)
    return a


# ---- motion -----------------------------------------------------------------

def motion_to_dict(m: MotionSequence) -> dict:
    return {
        "T": m.T.tolist(),
        "theta": m.theta.tolist(),
        "beta": m.beta.tolist(),
        "frame_rate": m.frame_rate,
        "frame": m.frame.value,
    }


def motion_from_dict(doc: dict) -> MotionSequence:
    T = _array(_field(doc, "T"), (None, 3), "T")
    theta = _array(_field(doc, "theta"), (None, 24, 3), "theta")
    beta = _array(_field(doc, "beta"), (10,), "beta")
    fr = _field(doc, "frame_rate")
    frame = _field(doc, "frame")
    if frame not in CoordinateFrame.__members__:
        raise ParseError(f"unknown frame tag {frame!r}", field="frame")
    if not isinstance(fr, (int, float)):
        raise ParseError("frame_rate must be a number", field="frame_rate")
    try:
        return MotionSequence(T, theta, beta, float(fr), CoordinateFrame(frame))
    except ValidationError as e:
        raise ParseError(str(e), field="motion") from None


def dumps_motion(m: MotionSequence) -> str:
    return _dumps(motion_to_dict(m))


def loads_motion(text: str | bytes) -> MotionSequence:
    return motion_from_dict(_loads(text))


def save_motion(m: MotionSequence, path) -> None:
    Path(path).write_text(dumps_motion(m))


def load_motion(path) -> MotionSequence:
    return loads_motion(Path(path).read_bytes())


# ---- transform --------------------------------------------------------------

def transform_to_dict(t: RigidTransform) -> dict:
    return {"matrix": t.matrix.tolist(), "source_frame": t.source_frame.value, "target_frame": t.target_frame.value}


def transform_from_dict(doc: dict) -> RigidTransform:
    m = _array(_field(doc, "matrix"), (4, 4), "matrix")
    src, dst = _field(doc, "source_frame"), _field(doc, "target_frame")
    for name, tag in (("source_frame", src), ("target_frame", dst)):
        if tag not in CoordinateFrame.__members__:
            raise ParseError(f"unknown frame tag {tag!r}", field=name)
    try:
        return RigidTransform(m, CoordinateFrame(src), CoordinateFrame(dst))
    except ValidationError as e:
        raise ParseError(str(e), field="matrix") from None


def dumps_transform(t: RigidTransform) -> str:
    return _dumps(transform_to_dict(t))


def loads_transform(text: str | bytes) -> RigidTransform:
    return transform_from_dict(_loads(text))


def save_transform(t: RigidTransform, path) -> None:
    Path(path).write_text(dumps_transform(t))


def load_transform(path) -> RigidTransform:
    return loads_transform(Path(path).read_bytes())


# ---- PLY --------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _fmt_float(x: float) -> str:
    return repr(float(x))


def dumps_ply(vertices: np.ndarray, faces: np.ndarray | None = None, normals: np.ndarray | None = None,
              comments: dict | None = None, binary: bool = False) -> bytes:
    v = np.asarray(vertices, dtype=float).reshape(-1, 3)
    cols = [v]
    props = ["x", "y", "z"]
    if normals is not None:
        cols.append(np.asarray(normals, dtype=float).reshape(-1, 3))
        props += ["nx", "ny", "nz"]
    data = np.concatenate(cols, axis=1)
    f = np.zeros((0, 3), dtype=np.int64) if faces is None else np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    head = ["ply", "format binary_little_endian 1.0" if binary else "format ascii 1.0"]
    for k, val in sorted((comments or {}).items()):
        head.append(f"comment {k} {val}")
    head.append(f"element vertex {len(v)}")
    head += [f"property double {p}" for p in props]
    head.append(f"element face {len(f)}")
    head.append("property list uchar int vertex_indices")
    head.append("end_header")
    out = ("\n".join(head) + "\n").encode("ascii")
    if binary:
        out += data.astype("<f8").tobytes()
        if len(f):
            rec = np.empty(len(f), dtype=[("n", "u1"), ("i", "<i4", (3,))])
            rec["n"] = 3
            rec["i"] = f
            out += rec.tobytes()
        return out
    lines = [" ".join(_fmt_float(x) for x in row) for row in data]
    lines += ["3 " + " ".join(str(int(i)) for i in row) for row in f]
    return out + ("\n".join(lines) + ("\n" if lines else "")).encode("ascii")


def loads_ply(buf: bytes) -> dict:
    """Parse PLY bytes into ``{"vertices", "normals" (or None), "faces", "comments"}``."""
    end = buf.find(b"end_header")
    if not buf.startswith(b"ply") or end < 0:
        raise ParseError("missing PLY magic or end_header", field="header", offset=0)
    nl = buf.find(b"\n", end)
    body_start = len(buf) if nl < 0 else nl + 1
    header = buf[:end].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements: list[list] = []
    comments: dict = {}
    offset = 0
    for line in header:
        toks = line.split()
        offset += len(line) + 1
        if not toks or toks[0] == "ply":
            continue
        if toks[0] == "format":
            fmt = toks[1] if len(toks) > 1 else None
        elif toks[0] == "comment" and len(toks) >= 3:
            comments[toks[1]] = " ".join(toks[2:])
        elif toks[0] == "element":
            if len(toks) != 3 or not toks[2].isdigit():
                raise ParseError("bad element line", field="header.element", offset=offset - len(line) - 1)
            elements.append([toks[1], int(toks[2]), []])
        elif toks[0] == "property":
            if not elements:
                raise ParseError("property before element", field="header.property", offset=offset - len(line) - 1)
            elements[-1][2].append(toks[1:])
    if fmt not in ("ascii", "binary_little_endian"):
        raise ParseError(f"unsupported format {fmt!r}", field="header.format", offset=0)
    names = [e[0] for e in elements]
    if "vertex" not in names:
        raise ParseError("no vertex element", field="vertex", offset=0)

    out = {"vertices": None, "normals": None, "faces": np.zeros((0, 3), dtype=np.int64), "comments": comments}
    if fmt == "ascii":
        _parse_ascii(buf, body_start, elements, out)
    else:
        _parse_binary(buf, body_start, elements, out)
    return out


def _store(out: dict, ename: str, props: list, cols: dict, faces: list | None) -> None:
    if ename == "vertex":
        for k in ("x", "y", "z"):
            if k not in cols:
                raise ParseError("vertex element lacks coordinate", field=f"vertex.{k}")
        out["vertices"] = np.stack([cols["x"], cols["y"], cols["z"]], axis=1).astype(float)
        if all(k in cols for k in ("nx", "ny", "nz")):
            out["normals"] = np.stack([cols["nx"], cols["ny"], cols["nz"]], axis=1).astype(float)
    elif ename == "face" and faces is not None:
        out["faces"] = np.array(faces, dtype=np.int64).reshape(-1, 3)


def _parse_ascii(buf: bytes, start: int, elements: list, out: dict) -> None:
    pos = start
    for ename, count, props in elements:
        scalar_props = [p[-1] for p in props if p[0] != "list"]
        cols = {p: np.empty(count) for p in scalar_props}
        faces = [] if ename == "face" else None
        for i in range(count):
            nl = buf.find(b"\n", pos)
            if nl < 0:
                nl = len(buf)
            if pos >= len(buf):
                raise ParseError(f"truncated: expected {count} {ename} rows, got {i}", field=f"{ename}[{i}]", offset=pos)
            toks = buf[pos:nl].split()
            j = 0
            try:
                for p in props:
                    if p[0] == "list":
                        n = int(toks[j])
                        items = [int(t) for t in toks[j + 1 : j + 1 + n]]
                        if len(items) != n:
                            raise IndexError
                        if ename == "face":
                            if n != 3:
                                raise ParseError("only triangle faces are supported", field=f"face[{i}]", offset=pos)
                            faces.append(items)
                        j += 1 + n
                    else:
                        cols[p[-1]][i] = float(toks[j])
                        j += 1
            except (IndexError, ValueError):
                raise ParseError("malformed row", field=f"{ename}[{i}]", offset=pos) from None
            pos = nl + 1
        _store(out, ename, props, cols, faces)


def _parse_binary(buf: bytes, start: int, elements: list, out: dict) -> None:
    pos = start
    for ename, count, props in elements:
        has_list = any(p[0] == "list" for p in props)
        if not has_list:
            dt = np.dtype([(p[-1], "<" + _PLY_TYPES[p[0]]) for p in props])
            need = dt.itemsize * count
            if pos + need > len(buf):
                raise ParseError(f"truncated {ename} block", field=ename, offset=len(buf))
            rec = np.frombuffer(buf, dtype=dt, count=count, offset=pos)
            pos += need
            _store(out, ename, props, {n: rec[n].astype(float) for n in dt.names}, None)
            continue
        faces = []
        for i in range(count):
            for p in props:
                if p[0] == "list":
                    ct, it = _PLY_TYPES[p[1]], _PLY_TYPES[p[2]]
                    cs, isz = np.dtype(ct).itemsize, np.dtype(it).itemsize
                    if pos + cs > len(buf):
                        raise ParseError("truncated list", field=f"{ename}[{i}]", offset=pos)
                    n = int(np.frombuffer(buf, dtype="<" + ct, count=1, offset=pos)[0])
                    pos += cs
                    if pos + n * isz > len(buf):
                        raise ParseError("truncated list", field=f"{ename}[{i}]", offset=pos)
                    items = np.frombuffer(buf, dtype="<" + it, count=n, offset=pos).tolist()
                    pos += n * isz
                    if ename == "face":
                        if n != 3:
                            raise ParseError("only triangle faces are supported", field=f"face[{i}]", offset=pos)
                        faces.append(items)
                else:
                    pos += np.dtype(_PLY_TYPES[p[0]]).itemsize
        _store(out, ename, props, {}, faces)


def dumps_cloud(cloud: PointCloudFrame, binary: bool = False) -> bytes:
    meta = {"timestamp": repr(cloud.timestamp), "frame": cloud.frame.value, "label": cloud.label.value}
    return dumps_ply(cloud.points, comments=meta, binary=binary)


def loads_cloud(buf: bytes) -> PointCloudFrame:
    d = loads_ply(buf)
    c = d["comments"]
    try:
        ts = float(c.get("timestamp", 0.0))
    except ValueError:
        raise ParseError("bad timestamp comment", field="comment.timestamp") from None
    frame = c.get("frame", "WORLD")
    label = c.get("label", "RAW")
    if frame not in CoordinateFrame.__members__:
        raise ParseError(f"unknown frame tag {frame!r}", field="comment.frame")
    if label not in CloudLabel.__members__:
        raise ParseError(f"unknown label {label!r}", field="comment.label")
    return PointCloudFrame(d["vertices"], ts, CoordinateFrame(frame), CloudLabel(label))


def dumps_mesh(mesh: SceneMesh, binary: bool = False) -> bytes:
    return dumps_ply(mesh.vertices, mesh.faces, mesh.normals, binary=binary)


def loads_mesh(buf: bytes) -> SceneMesh:
    d = loads_ply(buf)
    if d["normals"] is None:
        raise ParseError("scene mesh requires per-vertex normals", field="vertex.nx")
    try:
        return SceneMesh(d["vertices"], d["faces"], d["normals"])
    except ValidationError as e:
        raise ParseError(str(e), field="face") from None


def save_cloud(cloud, path, binary=False):
    Path(path).write_bytes(dumps_cloud(cloud, binary))


def load_cloud(path) -> PointCloudFrame:
    return loads_cloud(Path(path).read_bytes())


def save_mesh(mesh, path, binary=False):
    Path(path).write_bytes(dumps_mesh(mesh, binary))


def load_mesh(path) -> SceneMesh:
    return loads_mesh(Path(path).read_bytes())


def save_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def load_json(path):
    return _loads(Path(path).read_bytes())
