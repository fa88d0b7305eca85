"""OFF / PLY mesh reading and PLY point-cloud writing."""
from __future__ import annotations

import os
import struct

import numpy as np

from ..errors import FormatError, InvalidInputError, ParseError
from ..geometry import PointCloud, TriMesh

# fixed 16-entry label palette (RGB)
PALETTE = np.array([
    [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200],
    [245, 130, 48], [145, 30, 180], [70, 240, 240], [240, 50, 230],
    [210, 245, 60], [250, 190, 212], [0, 128, 128], [220, 190, 255],
    [170, 110, 40], [255, 250, 200], [128, 0, 0], [0, 0, 128],
], dtype=np.uint8)


def label_colors(labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    return PALETTE[np.mod(labels, len(PALETTE))]


def _fan(poly):
    return [(poly[0], poly[i], poly[i + 1]) for i in range(1, len(poly) - 1)]


def _finish(vertices, faces, path):
    V = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    F = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if not np.isfinite(V).all():
        raise ParseError("non-finite vertex coordinate", path=path)
    if len(F) and (F.min() < 0 or F.max() >= len(V)):
        raise ParseError("face index out of range", path=path)
    return TriMesh(V, F)


# ------------------------------------------------------------------- OFF
def _content_lines(text):
    """(line number, tokens) for non-empty, non-comment lines."""
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield no, line.split()


def parse_off(text, path=None) -> TriMesh:
    lines = _content_lines(text)
    try:
        no, head = next(lines)
    except StopIteration:
        raise ParseError("empty file", line=1, path=path) from None
    first = head[0]
    if not first.startswith("OFF"):
        raise ParseError(f"expected OFF header, got {first!r}", line=no, path=path)
    # some writers glue the counts onto the header ("OFF490 1120 0")
    counts = ([first[3:]] if len(first) > 3 else []) + head[1:]
    if not counts:
        try:
            no, counts = next(lines)
        except StopIteration:
            raise ParseError("missing vertex/face counts", line=no + 1, path=path) from None
    try:
        nv, nf = int(counts[0]), int(counts[1])
    except (ValueError, IndexError):
        raise ParseError(f"bad counts line {' '.join(counts)!r}", line=no, path=path) from None
    if nv < 0 or nf < 0:
        raise ParseError("negative counts", line=no, path=path)
    verts = []
    for _ in range(nv):
        try:
            no, tok = next(lines)
        except StopIteration:
            raise ParseError(f"truncated: expected {nv} vertices, got {len(verts)}", line=no + 1, path=path) from None
        if len(tok) < 3:
            raise ParseError("vertex needs 3 coordinates", line=no, path=path)
        try:
            verts.append([float(t) for t in tok[:3]])
        except ValueError:
            raise ParseError(f"bad vertex {' '.join(tok)!r}", line=no, path=path) from None
    faces = []
    for i in range(nf):
        try:
            no, tok = next(lines)
        except StopIteration:
            raise ParseError(f"truncated: expected {nf} faces, got {i}", line=no + 1, path=path) from None
        try:
            n = int(tok[0])
            idx = [int(t) for t in tok[1:1 + n]]
        except ValueError:
            raise ParseError(f"bad face {' '.join(tok)!r}", line=no, path=path) from None
        if n < 3 or len(idx) != n:
            raise ParseError(f"face declares {n} vertices, has {len(tok) - 1}", line=no, path=path)
        if min(idx) < 0 or max(idx) >= nv:
            raise ParseError("face index out of range", line=no, path=path)
        faces += _fan(idx)
    return _finish(verts, faces, path)


# ------------------------------------------------------------------- PLY
_PLY_TYPES = {
    "char": "b", "int8": "b", "uchar": "B", "uint8": "B", "short": "h", "int16": "h",
    "ushort": "H", "uint16": "H", "int": "i", "int32": "i", "uint": "I", "uint32": "I",
    "float": "f", "float32": "f", "double": "d", "float64": "d",
}


def _parse_ply_header(data: bytes, path):
    end = data.find(b"end_header")
    if end < 0:
        raise ParseError("missing end_header", path=path)
    nl = data.find(b"\n", end)
    body_start = len(data) if nl < 0 else nl + 1
    header = data[:end].decode("ascii", errors="replace").splitlines()
    if not header or header[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", line=1, path=path)
    fmt = None
    elements = []
    for no, raw in enumerate(header[1:], 2):
        tok = raw.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) < 2:
                raise ParseError("bad format line", line=no, path=path)
            fmt = tok[1]
        elif tok[0] == "element":
            try:
                elements.append([tok[1], int(tok[2]), []])
            except (IndexError, ValueError):
                raise ParseError(f"bad element line {raw!r}", line=no, path=path) from None
            if elements[-1][1] < 0:
                raise ParseError("negative element count", line=no, path=path)
        elif tok[0] == "property":
            if not elements:
                raise ParseError("property before element", line=no, path=path)
            if len(tok) >= 5 and tok[1] == "list":
                if tok[2] not in _PLY_TYPES or tok[3] not in _PLY_TYPES:
                    raise ParseError(f"unknown list type in {raw!r}", line=no, path=path)
                elements[-1][2].append((tok[4], "list", tok[2], tok[3]))
            elif len(tok) == 3 and tok[1] in _PLY_TYPES:
                elements[-1][2].append((tok[2], tok[1], None, None))
            else:
                raise ParseError(f"bad property line {raw!r}", line=no, path=path)
        else:
            raise ParseError(f"unexpected header keyword {tok[0]!r}", line=no, path=path)
    if fmt is None:
        raise ParseError("missing format line", path=path)
    if fmt not in ("ascii", "binary_little_endian"):
        raise FormatError(f"unsupported PLY format {fmt!r}")
    return fmt, elements, body_start, len(header) + 1


def _ply_ascii(body: bytes, elements, first_line, path):
    lines = body.decode("ascii", errors="replace").splitlines()
    pos = 0
    out = {}
    for name, count, props in elements:
        rows = []
        for _ in range(count):
            while pos < len(lines) and not lines[pos].strip():
                pos += 1
            if pos >= len(lines):
                raise ParseError(f"truncated {name} data", line=first_line + pos, path=path)
            tok = lines[pos].split()
            lineno = first_line + pos
            pos += 1
            row = []
            j = 0
            try:
                for pname, ptype, ctype, itype in props:
                    if ptype == "list":
                        n = int(tok[j])
                        row.append([float(t) for t in tok[j + 1:j + 1 + n]])
                        if len(row[-1]) != n:
                            raise IndexError
                        j += 1 + n
                    else:
                        row.append(float(tok[j]))
                        j += 1
            except (ValueError, IndexError):
                raise ParseError(f"bad {name} row", line=lineno, path=path) from None
            rows.append(row)
        out[name] = rows
    return out


def _ply_binary(body: bytes, elements, path):
    pos = 0
    out = {}
    for name, count, props in elements:
        rows = []
        scalar_only = all(p[1] != "list" for p in props)
        if scalar_only:
            dt = np.dtype([(p[0], "<" + _PLY_TYPES[p[1]]) for p in props])
            need = dt.itemsize * count
            if pos + need > len(body):
                raise ParseError(f"truncated binary {name} data", path=path)
            arr = np.frombuffer(body, dtype=dt, count=count, offset=pos)
            pos += need
            out[name] = [[float(r[p[0]]) for p in props] for r in arr]
            continue
        for _ in range(count):
            row = []
            for pname, ptype, ctype, itype in props:
                if ptype == "list":
                    cs = struct.calcsize("<" + _PLY_TYPES[ctype])
                    if pos + cs > len(body):
                        raise ParseError(f"truncated binary {name} data", path=path)
                    n = struct.unpack_from("<" + _PLY_TYPES[ctype], body, pos)[0]
                    pos += cs
                    fmt = "<" + _PLY_TYPES[itype] * n
                    if pos + struct.calcsize(fmt) > len(body):
                        raise ParseError(f"truncated binary {name} data", path=path)
                    row.append(list(struct.unpack_from(fmt, body, pos)))
                    pos += struct.calcsize(fmt)
                else:
                    fmt = "<" + _PLY_TYPES[ptype]
                    if pos + struct.calcsize(fmt) > len(body):
                        raise ParseError(f"truncated binary {name} data", path=path)
                    row.append(float(struct.unpack_from(fmt, body, pos)[0]))
                    pos += struct.calcsize(fmt)
            rows.append(row)
        out[name] = rows
    return out


def read_ply(data: bytes, path=None):
    """Parse PLY bytes into ``(vertex array, triangle faces, vertex props)``."""
    fmt, elements, body_start, first_line = _parse_ply_header(data, path)
    body = data[body_start:]
    values = _ply_ascii(body, elements, first_line, path) if fmt == "ascii" else _ply_binary(body, elements, path)
    vel = next((e for e in elements if e[0] == "vertex"), None)
    if vel is None:
        raise ParseError("no vertex element", path=path)
    names = [p[0] for p in vel[2]]
    if not all(c in names for c in "xyz"):
        raise ParseError("vertex element lacks x/y/z", path=path)
    rows = values["vertex"]
    cols = {n: np.array([r[i] for r in rows], dtype=np.float64) for i, n in enumerate(names)
            if vel[2][i][1] != "list"}
    verts = np.stack([cols["x"], cols["y"], cols["z"]], axis=1) if rows else np.zeros((0, 3))
    faces = []
    fel = next((e for e in elements if e[0] == "face"), None)
    if fel is not None:
        li = next((i for i, p in enumerate(fel[2]) if p[1] == "list"), None)
        if li is None:
            raise ParseError("face element has no index list", path=path)
        for r in values["face"]:
            idx = [int(v) for v in r[li]]
            if len(idx) < 3:
                raise ParseError("face with fewer than 3 vertices", path=path)
            faces += _fan(idx)
    return verts, faces, cols


def load_mesh(path) -> TriMesh:
    """ASCII OFF or ASCII / binary little-endian PLY; polygons are fan-split."""
    path = os.fspath(path)
    with open(path, "rb") as fh:
        data = fh.read()
    ext = os.path.splitext(path)[1].lower()
    if ext == ".off" or (ext not in (".ply",) and data.lstrip().startswith(b"OFF")):
        return parse_off(data.decode("ascii", errors="replace"), path)
    if ext == ".ply" or data.startswith(b"ply"):
        verts, faces, _ = read_ply(data, path)
        return _finish(verts, faces, path)
    raise FormatError(f"unsupported mesh format: {path}")


def load_point_cloud(path) -> PointCloud:
    """Points (and an optional integer ``label`` property) from a PLY or
    whitespace-separated XYZ file."""
    path = os.fspath(path)
    ext = os.path.splitext(path)[1].lower()
    if ext in (".xyz", ".txt", ".pts"):
        try:
            arr = np.loadtxt(path, ndmin=2)
        except ValueError as exc:
            raise ParseError(str(exc), path=path) from None
        if arr.shape[1] < 3:
            raise ParseError("need at least 3 columns", path=path)
        labels = arr[:, 3].astype(np.int64) if arr.shape[1] >= 4 else None
        return PointCloud(arr[:, :3], labels)
    with open(path, "rb") as fh:
        verts, _, cols = read_ply(fh.read(), path)
    labels = cols["label"].astype(np.int64) if "label" in cols else None
    return PointCloud(verts, labels)


def export_ply(cloud, path, colors=None, labels=None):
    """ASCII PLY with x, y, z, optional red/green/blue and optional label.
    Labels without explicit colors also get palette colors."""
    pts = np.asarray(cloud.points if isinstance(cloud, PointCloud) else cloud, dtype=np.float64)
    if labels is None and isinstance(cloud, PointCloud):
        labels = cloud.labels
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
        raise InvalidInputError("export_ply needs a non-empty (n, 3) cloud")
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
        if colors is None:
            colors = label_colors(labels)
    if colors is not None:
        colors = np.asarray(colors, dtype=np.uint8)
        if colors.shape != (len(pts), 3):
            raise InvalidInputError("colors must be (n, 3)")
    header = ["ply", "format ascii 1.0", f"element vertex {len(pts)}",
              "property double x", "property double y", "property double z"]
    if colors is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    if labels is not None:
        header.append("property int label")
    header.append("end_header")
    rows = []
    for i, p in enumerate(pts):
        fields = [repr(float(v)) for v in p]
        if colors is not None:
            fields += [str(int(c)) for c in colors[i]]
        if labels is not None:
            fields.append(str(int(labels[i])))
        rows.append(" ".join(fields))
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        fh.write("\n".join(header + rows) + "\n")
    return path
