"""Model checkpoint file: config echo plus named float32 parameter blobs.

Layout (little-endian): magic "GPMDL1\\0\\0", u32 version, u32 config
block length + UTF-8 key=value lines, u32 parameter count, then per
parameter: u16 name length + name, u8 ndim, u32 dims, f32 row-major data.
Like every other format here the file stores float32; in-memory compute
is float64, and trained state is kept on the float32 grid so a round
trip is exact.
"""

import struct

import numpy as np

from .model import ModelConfig, ModelParams
from .pointcloud import SensorKind

_MAGIC = b"GPMDL1\0\0"
_VERSION = 1

_SCALARS = {
    "embedding_channels": int, "voxel_size": float, "k": int, "lam": float,
    "mu": float, "epsilon": float, "max_candidates_factor": int,
    "patch_cap": int, "num_classes": int, "seed": int, "pool_sharing": str,
    "use_fusion": bool, "use_hypernet": bool, "use_rel_pos": bool,
    "use_stage_code": bool,
}
_TUPLES = ("encoder_layers", "encoder_channels", "decoder_layers",
           "decoder_channels", "pool_capacities")


class CheckpointError(ValueError):
    pass


def _config_lines(config, kinds):
    lines = [f"kinds={','.join(k.name for k in kinds)}"]
    for name in _TUPLES:
        lines.append(f"{name}={','.join(str(v) for v in getattr(config, name))}")
    for name in _SCALARS:
        lines.append(f"{name}={getattr(config, name)}")
    return "\n".join(lines) + "\n"


def _parse_config(text):
    fields = {}
    kinds = None
    for line in text.strip().splitlines():
        key, _, raw = line.partition("=")
        if key == "kinds":
            kinds = tuple(SensorKind[n] for n in raw.split(",") if n)
        elif key in _TUPLES:
            fields[key] = tuple(int(v) for v in raw.split(","))
        elif key in _SCALARS:
            want = _SCALARS[key]
            fields[key] = raw == "True" if want is bool else want(raw)
        else:
            raise CheckpointError(f"unknown config key {key!r}")
    if kinds is None:
        raise CheckpointError("checkpoint config lacks sensor kinds")
    return ModelConfig(**fields), kinds


def save_checkpoint(path, params):
    blob = bytearray()
    blob += _MAGIC
    blob += struct.pack("<I", _VERSION)
    cfg = _config_lines(params.config, params.kinds).encode("utf-8")
    blob += struct.pack("<I", len(cfg))
    blob += cfg
    named = params.named_parameters()
    blob += struct.pack("<I", len(named))
    for name, p in named:
        enc = name.encode("utf-8")
        blob += struct.pack("<H", len(enc))
        blob += enc
        blob += struct.pack("<B", p.data.ndim)
        blob += struct.pack(f"<{p.data.ndim}I", *p.data.shape)
        blob += np.ascontiguousarray(p.data, dtype=np.float32).tobytes()
    with open(path, "wb") as f:
        f.write(bytes(blob))


class _Cursor:
    def __init__(self, buf):
        self.buf = buf
        self.off = 0

    def take(self, n, what):
        if self.off + n > len(self.buf):
            raise CheckpointError(f"truncated {what} at byte {self.off}")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path):
    with open(path, "rb") as f:
        buf = f.read()
    cur = _Cursor(buf)
    if cur.take(len(_MAGIC), "magic") != _MAGIC:
        raise CheckpointError(f"{path}: not a model checkpoint")
    (version,) = cur.unpack("<I", "version")
    if version != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (cfg_len,) = cur.unpack("<I", "config length")
    config, kinds = _parse_config(cur.take(cfg_len, "config").decode("utf-8"))

    params = ModelParams(config, kinds=kinds)
    named = dict(params.named_parameters())
    (count,) = cur.unpack("<I", "parameter count")
    if count != len(named):
        raise CheckpointError(
            f"{count} parameters in file, model wants {len(named)}")
    seen = set()
    for _ in range(count):
        (nlen,) = cur.unpack("<H", "name length")
        name = cur.take(nlen, "name").decode("utf-8")
        if name not in named:
            raise CheckpointError(f"unexpected parameter {name!r}")
        if name in seen:
            raise CheckpointError(f"duplicate parameter {name!r}")
        seen.add(name)
        (ndim,) = cur.unpack("<B", "rank")
        shape = cur.unpack(f"<{ndim}I", "shape")
        want = named[name].data.shape
        if shape != want:
            raise CheckpointError(f"{name}: shape {shape} != model {want}")
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        raw = cur.take(4 * n, f"data of {name}")
        named[name].data = np.frombuffer(raw, dtype="<f4").reshape(
            shape).astype(np.float64)
    if cur.off != len(buf):
        raise CheckpointError(f"trailing bytes after byte {cur.off}")
    return params
