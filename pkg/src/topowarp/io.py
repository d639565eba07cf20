"""File formats: PLY point clouds, 16-bit PNG depth frames, Middlebury flow,
and line-delimited JSON for events and metric reports.

PLY vertices carry ``x y z nx ny nz`` as doubles and ``red green blue`` as
uchar (colors are quantized to ``round(255 c)``). Keypoints, if present, are
an extra ``keypoint`` element with ``int vertex_index`` and
``list ushort double descriptor``.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np

from .camera import DepthFrame, Intrinsics
from .geometry import Keypoints, OrientedPointCloud
from .topology import TopologyEvent


class PlyError(ValueError):
    pass


class PlyHeaderError(PlyError):
    pass


class PlyMissingPropertyError(PlyError):
    pass


class PlyTruncatedError(PlyError):
    pass


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_REQUIRED = ("x", "y", "z", "nx", "ny", "nz")


def _u8(colors: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(colors * 255.0 + 0.5), 0, 255).astype(np.uint8)


def save_ply(path, cloud: OrientedPointCloud, binary: bool = True) -> None:
    n = len(cloud)
    kp = cloud.keypoints
    lines = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
             f"element vertex {n}"]
    lines += [f"property double {p}" for p in _REQUIRED]
    lines += [f"property uchar {c}" for c in ("red", "green", "blue")]
    if kp is not None:
        lines += [f"element keypoint {len(kp)}", "property int vertex_index",
                  "property list ushort double descriptor"]
    lines.append("end_header")
    header = ("\n".join(lines) + "\n").encode("ascii")
    rgb = _u8(cloud.colors)
    if binary:
        vdt = np.dtype([(p, "<f8") for p in _REQUIRED] + [(c, "u1") for c in ("red", "green", "blue")])
        rec = np.empty(n, dtype=vdt)
        for a, p in enumerate(("x", "y", "z")):
            rec[p] = cloud.points[:, a]
        for a, p in enumerate(("nx", "ny", "nz")):
            rec[p] = cloud.normals[:, a]
        for a, c in enumerate(("red", "green", "blue")):
            rec[c] = rgb[:, a]
        body = [rec.tobytes()]
        if kp is not None:
            dim = kp.descriptors.shape[1]
            kdt = np.dtype([("i", "<i4"), ("n", "<u2"), ("d", "<f8", (dim,))])
            krec = np.empty(len(kp), dtype=kdt)
            krec["i"], krec["n"], krec["d"] = kp.indices, dim, kp.descriptors
            body.append(krec.tobytes())
        Path(path).write_bytes(header + b"".join(body))
        return
    out = [header.decode("ascii")]
    for p, nrm, c in zip(cloud.points, cloud.normals, rgb):
        out.append(" ".join(repr(float(v)) for v in (*p, *nrm)) + f" {c[0]} {c[1]} {c[2]}\n")
    if kp is not None:
        for i, d in zip(kp.indices, kp.descriptors):
            out.append(f"{int(i)} {len(d)} " + " ".join(repr(float(v)) for v in d) + "\n")
    Path(path).write_text("".join(out), encoding="ascii")


def _parse_header(data: bytes):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise PlyHeaderError("malformed header: missing 'ply' magic or 'end_header'")
    nl = data.find(b"\n", end)
    body_start = len(data) if nl < 0 else nl + 1
    try:
        text = data[:end].decode("ascii")
    except UnicodeDecodeError as exc:
        raise PlyHeaderError("malformed header: non-ascii bytes") from exc
    fmt = None
    elements: list[dict] = []
    for raw in text.splitlines()[1:]:
        tok = raw.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) != 3 or tok[1] not in ("ascii", "binary_little_endian", "binary_big_endian"):
                raise PlyHeaderError(f"malformed header: bad format line {raw!r}")
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise PlyHeaderError(f"malformed header: bad element line {raw!r}")
            elements.append({"name": tok[1], "count": int(tok[2]), "props": []})
        elif tok[0] == "property":
            if not elements:
                raise PlyHeaderError("malformed header: property before element")
            if len(tok) == 5 and tok[1] == "list":
                if tok[2] not in _PLY_TYPES or tok[3] not in _PLY_TYPES:
                    raise PlyHeaderError(f"malformed header: unknown type in {raw!r}")
                elements[-1]["props"].append((tok[4], _PLY_TYPES[tok[3]], _PLY_TYPES[tok[2]]))
            elif len(tok) == 3 and tok[1] in _PLY_TYPES:
                elements[-1]["props"].append((tok[2], _PLY_TYPES[tok[1]], None))
            else:
                raise PlyHeaderError(f"malformed header: bad property line {raw!r}")
        else:
            raise PlyHeaderError(f"malformed header: unexpected line {raw!r}")
    if fmt is None:
        raise PlyHeaderError("malformed header: no format line")
    return fmt, elements, body_start


def _read_binary(data: bytes, pos: int, el: dict, endian: str):
    props = el["props"]
    n = el["count"]
    if all(p[2] is None for p in props):
        dt = np.dtype([(name, endian + t) for name, t, _ in props])
        need = dt.itemsize * n
        if pos + need > len(data):
            raise PlyTruncatedError(f"truncated payload in element {el['name']!r}")
        rec = np.frombuffer(data, dtype=dt, count=n, offset=pos)
        return {name: rec[name].astype(np.float64) for name, _, _ in props}, pos + need
    cols: dict[str, list] = {name: [] for name, _, _ in props}
    for _ in range(n):
        for name, t, count_t in props:
            if count_t is None:
                sz = np.dtype(t).itemsize
                if pos + sz > len(data):
                    raise PlyTruncatedError(f"truncated payload in element {el['name']!r}")
                cols[name].append(np.frombuffer(data, endian + t, 1, pos)[0])
                pos += sz
            else:
                csz = np.dtype(count_t).itemsize
                if pos + csz > len(data):
                    raise PlyTruncatedError(f"truncated payload in element {el['name']!r}")
                k = int(np.frombuffer(data, endian + count_t, 1, pos)[0])
                pos += csz
                sz = np.dtype(t).itemsize * k
                if pos + sz > len(data):
                    raise PlyTruncatedError(f"truncated payload in element {el['name']!r}")
                cols[name].append(np.frombuffer(data, endian + t, k, pos).astype(np.float64))
                pos += sz
    return cols, pos


def _read_ascii(lines, li: int, el: dict):
    cols: dict[str, list] = {name: [] for name, _, _ in el["props"]}
    for _ in range(el["count"]):
        if li >= len(lines):
            raise PlyTruncatedError(f"truncated payload in element {el['name']!r}")
        tok = lines[li].split()
        li += 1
        k = 0
        try:
            for name, t, count_t in el["props"]:
                if count_t is None:
                    cols[name].append(float(tok[k]))
                    k += 1
                else:
                    m = int(tok[k])
                    cols[name].append(np.array([float(v) for v in tok[k + 1:k + 1 + m]]))
                    if len(cols[name][-1]) != m:
                        raise IndexError
                    k += 1 + m
        except (IndexError, ValueError) as exc:
            raise PlyTruncatedError(f"truncated payload in element {el['name']!r}") from exc
    return cols, li


def load_ply(path) -> OrientedPointCloud:
    data = Path(path).read_bytes()
    fmt, elements, pos = _parse_header(data)
    parsed = {}
    if fmt == "ascii":
        lines = [ln for ln in data[pos:].decode("ascii", errors="replace").splitlines() if ln.strip()]
        li = 0
        for el in elements:
            parsed[el["name"]], li = _read_ascii(lines, li, el)
    else:
        endian = "<" if fmt == "binary_little_endian" else ">"
        for el in elements:
            parsed[el["name"]], pos = _read_binary(data, pos, el, endian)
    if "vertex" not in parsed:
        raise PlyMissingPropertyError("missing element vertex")
    v = parsed["vertex"]
    for p in _REQUIRED:
        if p not in v:
            raise PlyMissingPropertyError(f"missing property {p}")
    vtypes = {name: t for name, t, _ in next(e for e in elements if e["name"] == "vertex")["props"]}
    pts = np.stack([np.asarray(v[p], dtype=np.float64) for p in ("x", "y", "z")], axis=1)
    nrm = np.stack([np.asarray(v[p], dtype=np.float64) for p in ("nx", "ny", "nz")], axis=1)
    colors = None
    if all(c in v for c in ("red", "green", "blue")):
        colors = np.stack([np.asarray(v[c], dtype=np.float64) for c in ("red", "green", "blue")], axis=1)
        if vtypes["red"] in ("u1", "i1"):
            colors = colors / 255.0
        elif vtypes["red"] in ("u2", "i2"):
            colors = colors / 65535.0
    valid = np.linalg.norm(nrm, axis=1) > 0
    kp = None
    if "keypoint" in parsed:
        k = parsed["keypoint"]
        if "vertex_index" not in k or "descriptor" not in k:
            raise PlyMissingPropertyError("missing property vertex_index")
        desc = k["descriptor"]
        desc = np.stack(desc) if len(desc) else np.zeros((0, 0))
        kp = Keypoints(np.asarray(k["vertex_index"], dtype=np.int64), desc)
    return OrientedPointCloud(pts, nrm, colors, valid=valid, keypoints=kp)


# ---------------------------------------------------------------------------
# depth frames
# ---------------------------------------------------------------------------

def _sidecar(path) -> Path:
    return Path(path).with_suffix(".txt")


def save_depth(path, frame: DepthFrame, depth_scale: float = 1000.0) -> None:
    """16-bit PNG depth (``raw = round(depth * scale)``) plus a sidecar
    ``<name>.txt`` holding ``fx fy cx cy depth_scale``."""
    from PIL import Image

    K = frame.require_intrinsics()
    raw = np.floor(frame.depth * depth_scale + 0.5)
    if raw.max(initial=0) > 65535:
        raise ValueError("depth exceeds the 16-bit range at this depth_scale")
    Image.fromarray(raw.astype(np.uint16)).save(Path(path), format="PNG")
    _sidecar(path).write_text(f"{K.fx!r} {K.fy!r} {K.cx!r} {K.cy!r} {depth_scale!r}\n")


def load_depth(path, depth_cutoff: float = 5.0) -> DepthFrame:
    from PIL import Image

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"depth image not found: {path}")
    side = _sidecar(path)
    if not side.exists():
        raise FileNotFoundError(f"intrinsics sidecar not found: {side}")
    vals = side.read_text().split()
    if len(vals) != 5:
        raise ValueError(f"{side}: expected 'fx fy cx cy depth_scale'")
    fx, fy, cx, cy, scale = (float(v) for v in vals)
    with Image.open(path) as im:
        raw = np.array(im).astype(np.float64)
    if raw.ndim != 2:
        raise ValueError(f"{path}: depth image must be single-channel")
    return DepthFrame(raw / scale, Intrinsics(fx, fy, cx, cy), depth_cutoff=depth_cutoff)


# ---------------------------------------------------------------------------
# flow (Middlebury .flo; components above 1e9 mark unknown flow)
# ---------------------------------------------------------------------------

FLO_MAGIC = 202021.25
FLO_UNKNOWN = 1e10


def save_flow(path, flow: np.ndarray, valid: np.ndarray) -> None:
    f = np.array(flow, dtype=np.float32)
    f[~np.asarray(valid, dtype=bool)] = FLO_UNKNOWN
    h, w = f.shape[:2]
    Path(path).write_bytes(struct.pack("<fii", FLO_MAGIC, w, h) + f.astype("<f4").tobytes())


def load_flow(path):
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise ValueError(f"{path}: truncated flow header")
    magic, w, h = struct.unpack_from("<fii", data)
    if magic != np.float32(FLO_MAGIC):
        raise ValueError(f"{path}: not a .flo file")
    if len(data) < 12 + 8 * w * h:
        raise ValueError(f"{path}: truncated flow payload")
    f = np.frombuffer(data, "<f4", 2 * w * h, 12).reshape(h, w, 2).astype(np.float64)
    valid = np.all(np.abs(f) < 1e9, axis=2)
    return f, valid


# ---------------------------------------------------------------------------
# line-delimited JSON
# ---------------------------------------------------------------------------

def event_record(ev: TopologyEvent) -> dict:
    rec = {"label": ev.label, "timestamp": ev.timestamp, "count": len(ev),
           "centroid": ev.centroid.tolist(), "points": ev.points.tolist()}
    if ev.indices is not None:
        rec["indices"] = ev.indices.tolist()
    return rec


def save_events(path, events) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ev in events:
            fh.write(json.dumps(event_record(ev)) + "\n")


def load_events(path) -> list[TopologyEvent]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                pts = np.asarray(rec["points"], dtype=np.float64).reshape(-1, 3)
                out.append(TopologyEvent(rec["label"], rec["timestamp"], pts, rec.get("indices")))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{n}: bad event record ({exc})") from exc
    return out


def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, np.generic):
        return _clean(v.item())
    return v


def append_metrics(path, record: dict) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(_clean(record)) + "\n")


def metrics_line(record: dict) -> str:
    return json.dumps(_clean(record))
