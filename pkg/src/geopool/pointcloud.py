"""Point-cloud data model, binary/PLY loading, and patch sampling.

Feature channel meaning is fixed by the sensor kind: camera-style clouds
carry 6 channels (RGB + surface normal), lidar-style clouds carry 1
(intensity). Files store f32/u16; in memory everything is float64 so the
math downstream is uniform, and values stay exactly f32-representable so
save -> load -> save is bit-identical.
"""

import struct
from dataclasses import dataclass, field
from enum import Enum

import numpy as np


class SensorKind(Enum):
    CameraLike = 0
    LidarLike = 1


CHANNELS = {SensorKind.CameraLike: 6, SensorKind.LidarLike: 1}


class ParseError(ValueError):
    """Malformed cloud file; message carries the byte offset."""


@dataclass(frozen=True)
class SensorId:
    kind: SensorKind
    dataset: str = ""

    @property
    def channels(self):
        return CHANNELS[self.kind]


@dataclass
class PointCloud:
    positions: np.ndarray  # n×3 meters
    features: np.ndarray   # n×c, c fixed by sensor kind
    sensor: SensorId
    labels: np.ndarray = None  # optional n int64 class ids
    flags: tuple = ()

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        n = self.positions.shape[0]
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError(f"positions must be n-by-3, got {self.positions.shape}")
        want_c = self.sensor.channels
        if self.features.shape != (n, want_c):
            raise ValueError(
                f"features {self.features.shape} do not match {n} points"
                f" x {want_c} channels for {self.sensor.kind.name}")
        if self.labels is not None:
            self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
            if self.labels.shape != (n,):
                raise ValueError(
                    f"labels {self.labels.shape} do not match {n} points")

    @property
    def n(self):
        return self.positions.shape[0]

    def subset(self, idx):
        return PointCloud(
            positions=self.positions[idx],
            features=self.features[idx],
            sensor=self.sensor,
            labels=None if self.labels is None else self.labels[idx],
            flags=self.flags,
        )


# ---------------------------------------------------------------- RawBin ----
# little-endian: magic "GPCB1\0", u32 n, u32 c, u8 sensor_kind,
# n*3 f32 positions, n*c f32 features, u8 has_labels, then n u16 labels if set.

_MAGIC = b"GPCB1\0"


def save_rawbin(cloud, path):
    n, c = cloud.n, cloud.features.shape[1]
    parts = [_MAGIC, struct.pack("<IIB", n, c, cloud.sensor.kind.value)]
    parts.append(cloud.positions.astype("<f4").tobytes())
    parts.append(cloud.features.astype("<f4").tobytes())
    if cloud.labels is None:
        parts.append(b"\x00")
    else:
        if cloud.labels.min(initial=0) < 0 or cloud.labels.max(initial=0) > 0xFFFF:
            raise ValueError("labels outside u16 range")
        parts.append(b"\x01")
        parts.append(cloud.labels.astype("<u2").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Cursor:
    def __init__(self, buf):
        self.buf = buf
        self.off = 0

    def take(self, nbytes, what):
        if self.off + nbytes > len(self.buf):
            raise ParseError(f"truncated {what} at byte {self.off}")
        out = self.buf[self.off:self.off + nbytes]
        self.off += nbytes
        return out


def load_rawbin(path, dataset=""):
    with open(path, "rb") as fh:
        buf = fh.read()
    cur = _Cursor(buf)
    if cur.take(6, "magic") != _MAGIC:
        raise ParseError("bad magic at byte 0")
    n, c, kind_code = struct.unpack("<IIB", cur.take(9, "header"))
    try:
        kind = SensorKind(kind_code)
    except ValueError:
        raise ParseError(f"unknown sensor kind {kind_code} at byte 14") from None
    if c != CHANNELS[kind]:
        raise ParseError(f"channel count {c} wrong for {kind.name} at byte 10")
    pos = np.frombuffer(cur.take(n * 12, "positions"), dtype="<f4").reshape(n, 3)
    feat = np.frombuffer(cur.take(n * c * 4, "features"), dtype="<f4").reshape(n, c)
    has_labels = cur.take(1, "label flag")[0]
    labels = None
    if has_labels == 1:
        labels = np.frombuffer(cur.take(n * 2, "labels"), dtype="<u2").astype(np.int64)
    elif has_labels != 0:
        raise ParseError(f"bad label flag {has_labels} at byte {cur.off - 1}")
    if cur.off != len(buf):
        raise ParseError(f"trailing data at byte {cur.off}")
    return PointCloud(positions=pos, features=feat,
                      sensor=SensorId(kind, dataset), labels=labels)


# ------------------------------------------------------------------- PLY ----

_PLY_SCALARS = {
    "char": "i1", "uchar": "u1", "short": "i2", "ushort": "u2",
    "int": "i4", "uint": "u4", "float": "f4", "double": "f8",
    "int8": "i1", "uint8": "u1", "int16": "i2", "uint16": "u2",
    "int32": "i4", "uint32": "u4", "float32": "f4", "float64": "f8",
}
_KNOWN_PROPS = {"x", "y", "z", "red", "green", "blue",
                "nx", "ny", "nz", "intensity", "label"}


def load_ply(path, dataset=""):
    """Vertex-only PLY subset: ascii or binary_little_endian, known columns only."""
    with open(path, "rb") as fh:
        buf = fh.read()
    off = 0

    def next_line():
        nonlocal off
        end = buf.find(b"\n", off)
        if end < 0:
            raise ParseError(f"truncated header at byte {off}")
        line = buf[off:end].decode("ascii", errors="replace").strip()
        start = off
        off = end + 1
        return line, start

    line, at = next_line()
    if line != "ply":
        raise ParseError(f"not a ply file at byte {at}")
    fmt = None
    n_vertex = None
    props = []  # (name, numpy dtype) in declaration order
    in_vertex = False
    while True:
        line, at = next_line()
        if line == "end_header":
            break
        tok = line.split()
        if not tok or tok[0] == "comment":
            continue
        if tok[0] == "format":
            if tok[1] not in ("ascii", "binary_little_endian"):
                raise ParseError(f"unsupported format {tok[1]!r} at byte {at}")
            fmt = tok[1]
        elif tok[0] == "element":
            if tok[1] == "vertex":
                n_vertex = int(tok[2])
                in_vertex = True
            else:
                in_vertex = False
                if int(tok[2]) != 0:
                    raise ParseError(
                        f"unsupported element {tok[1]!r} at byte {at}")
        elif tok[0] == "property":
            if not in_vertex:
                continue
            if tok[1] == "list":
                raise ParseError(f"list property unsupported at byte {at}")
            name = tok[2]
            if name not in _KNOWN_PROPS:
                raise ParseError(f"unknown property {name!r} at byte {at}")
            if tok[1] not in _PLY_SCALARS:
                raise ParseError(f"unknown scalar type {tok[1]!r} at byte {at}")
            props.append((name, _PLY_SCALARS[tok[1]]))
    if fmt is None or n_vertex is None:
        raise ParseError(f"header missing format or vertex element at byte {off}")
    names = [p[0] for p in props]
    for need in ("x", "y", "z"):
        if need not in names:
            raise ParseError(f"missing coordinate property {need!r} at byte {off}")

    if fmt == "ascii":
        rows = np.zeros((n_vertex, len(props)), dtype=np.float64)
        for i in range(n_vertex):
            line, at = next_line()
            cols = line.split()
            if len(cols) != len(props):
                raise ParseError(
                    f"row has {len(cols)} columns, want {len(props)}, at byte {at}")
            rows[i] = [float(c) for c in cols]
        columns = {nm: rows[:, j] for j, (nm, _) in enumerate(props)}
        scale_u8 = {nm for nm, dt in props if dt == "u1"}
    else:
        dtype = np.dtype([(nm, "<" + dt) for nm, dt in props])
        need = dtype.itemsize * n_vertex
        if off + need > len(buf):
            raise ParseError(f"truncated payload at byte {len(buf)}")
        table = np.frombuffer(buf, dtype=dtype, count=n_vertex, offset=off)
        columns = {nm: table[nm].astype(np.float64) for nm, _ in props}
        scale_u8 = {nm for nm, dt in props if dt == "u1"}

    pos = np.column_stack([columns["x"], columns["y"], columns["z"]])
    flags = []
    labels = columns["label"].astype(np.int64) if "label" in columns else None

    if "intensity" in columns and "red" not in columns:
        feat = columns["intensity"][:, None]
        kind = SensorKind.LidarLike
    else:
        kind = SensorKind.CameraLike
        if all(c in columns for c in ("red", "green", "blue")):
            rgb = np.column_stack([columns["red"], columns["green"], columns["blue"]])
            if {"red", "green", "blue"} & scale_u8:
                rgb = rgb / 255.0
        else:
            rgb = np.zeros((n_vertex, 3))
            flags.append("colors_zero_filled")
        if all(c in columns for c in ("nx", "ny", "nz")):
            nrm = np.column_stack([columns["nx"], columns["ny"], columns["nz"]])
        else:
            nrm = np.zeros((n_vertex, 3))
            flags.append("normals_zero_filled")
        feat = np.column_stack([rgb, nrm])

    feat = feat.astype(np.float32).astype(np.float64)  # keep f32-representable
    pos = pos.astype(np.float32).astype(np.float64)
    return PointCloud(positions=pos, features=feat,
                      sensor=SensorId(kind, dataset), labels=labels,
                      flags=tuple(flags))


def load_cloud(path, fmt=None, dataset=""):
    """Dispatch on format; when fmt is None, sniff PLY vs RawBin from the magic."""
    if fmt is None:
        with open(path, "rb") as fh:
            head = fh.read(6)
        fmt = "ply" if head.startswith(b"ply") else "rawbin"
    fmt = fmt.lower()
    if fmt == "ply":
        return load_ply(path, dataset=dataset)
    if fmt == "rawbin":
        return load_rawbin(path, dataset=dataset)
    raise ValueError(f"unknown format {fmt!r}")


# ---------------------------------------------------------------- patches ----

def sample_patch(cloud, max_points, seed):
    """Seeded random center, then its spatially nearest <= max_points points.

    The patch preserves the original point order (it is literally a subset).
    """
    if cloud.n == 0:
        raise ValueError("cannot sample a patch from an empty cloud")
    if max_points < 1:
        raise ValueError(f"max_points must be >= 1, got {max_points}")
    if cloud.n <= max_points:
        return cloud
    rng = np.random.default_rng(seed)
    center = int(rng.integers(0, cloud.n))
    d2 = ((cloud.positions - cloud.positions[center]) ** 2).sum(axis=1)
    nearest = np.argsort(d2, kind="stable")[:max_points]
    return cloud.subset(np.sort(nearest))
