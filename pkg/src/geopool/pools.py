"""Sensor-aware hierarchical geometry pools.

Each pool is a capacity-bounded bank of feature rows per (sensor, stage).
Updates follow a fixed three-way discipline per candidate batch: candidates
similar enough to an existing entry are folded into it by exponential
blending, the rest are appended while room remains, and overflow candidates
are blended into their nearest entry. Similarities are computed once
against the pool state at the start of the update and reused throughout —
merges never trigger recomputation mid-batch.

Pools live outside the autodiff graph: stored rows are plain arrays and
never receive gradients.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .instrumentation import counters
from .pointcloud import SensorKind

DEFAULT_CAPACITIES = (32, 64, 128, 256)
DEFAULT_EPSILON = 0.9
DEFAULT_LAMBDA = 0.1
_NORM_FLOOR = 1e-12


class PoolFormatError(ValueError):
    pass


@dataclass
class GeometryPool:
    capacity: int
    width: int
    epsilon: float = DEFAULT_EPSILON
    lam: float = DEFAULT_LAMBDA
    stage: int = 0
    sensor_key: str = ""
    entries: np.ndarray = None

    def __post_init__(self):
        if self.entries is None:
            self.entries = np.zeros((0, self.width), dtype=np.float64)
        self.entries = np.ascontiguousarray(self.entries, dtype=np.float64)
        if self.entries.ndim != 2 or self.entries.shape[1] != self.width:
            raise ValueError(f"entries {self.entries.shape} vs width {self.width}")
        if self.entries.shape[0] > self.capacity:
            raise ValueError(
                f"{self.entries.shape[0]} entries exceed capacity {self.capacity}")

    @property
    def n(self):
        return self.entries.shape[0]


@dataclass
class UpdateReport:
    merged: int = 0            # phase-1 blends
    appended: int = 0
    overflow_merged: int = 0   # blends after the pool filled up
    # chronological trace: ("blend", entry_row, old_row_copy, cand_row)
    # or ("append", entry_row, cand_row) — enough to replay the update
    events: list = field(default_factory=list)


def cosine_similarity(a, b):
    """a.b / (|a||b|); zero-norm operands match nothing (similarity 0)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na < _NORM_FLOOR or nb < _NORM_FLOOR:
        return 0.0
    return float(a @ b / (na * nb))


def _unit_rows(mat):
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    safe = norms >= _NORM_FLOOR
    return np.where(safe, mat / np.where(safe, norms, 1.0), 0.0)


def candidate_similarity(candidates, pool):
    """Per candidate: (max cosine over pool entries, argmax row; ties -> lowest)."""
    if pool.n == 0:
        raise ValueError("pool is empty")
    candidates = np.asarray(candidates, dtype=np.float64)
    sims = _unit_rows(candidates) @ _unit_rows(pool.entries).T
    return sims.max(axis=1), sims.argmax(axis=1)


def update_pool(pool, candidates, seed):
    """One candidate batch through the merge/append/overflow discipline.

    Mutates the pool in place and returns an UpdateReport. Deterministic in
    (pool state, candidates, seed); the only randomness is the uniform
    choice of which overflow candidates get the remaining free rows.
    """
    candidates = np.ascontiguousarray(candidates, dtype=np.float64)
    if candidates.ndim != 2 or candidates.shape[1] != pool.width:
        raise ValueError(
            f"candidates {candidates.shape} do not match pool width {pool.width}")
    counters.pool_mutations += 1
    report = UpdateReport()
    m = candidates.shape[0]
    if m == 0:
        return report

    def blend(entry_row, cand_row, overflow):
        old = pool.entries[entry_row].copy()
        pool.entries[entry_row] = pool.lam * old + (1 - pool.lam) * candidates[cand_row]
        report.events.append(("blend", entry_row, old, cand_row))
        if overflow:
            report.overflow_merged += 1
        else:
            report.merged += 1

    def append(cand_row):
        pool.entries = np.vstack([pool.entries, candidates[cand_row][None]])
        report.events.append(("append", pool.n - 1, cand_row))
        report.appended += 1

    if pool.n > 0:
        # similarities fixed against the phase-start pool state
        s, t = candidate_similarity(candidates, pool)
        rest = []
        for i in range(m):
            if s[i] >= pool.epsilon:
                blend(t[i], i, overflow=False)
            else:
                rest.append(i)
        room = pool.capacity - pool.n
        if len(rest) <= room:
            for i in rest:
                append(i)
        else:
            selected = set()
            if room > 0:
                rng = np.random.default_rng(seed)
                pick = rng.choice(len(rest), size=room, replace=False)
                for j in pick:
                    append(rest[j])
                    selected.add(rest[j])
            for i in rest:
                if i not in selected:
                    blend(t[i], i, overflow=True)
    else:
        # fresh pool: append what fits, then blend leftovers into the newcomers
        if m <= pool.capacity:
            for i in range(m):
                append(i)
        else:
            rng = np.random.default_rng(seed)
            pick = rng.choice(m, size=pool.capacity, replace=False)
            chosen = set(int(j) for j in pick)
            for j in pick:
                append(int(j))
            _, t = candidate_similarity(candidates, pool)
            for i in range(m):
                if i not in chosen:
                    blend(t[i], i, overflow=True)

    if not np.isfinite(pool.entries).all():
        raise ValueError("pool entries became non-finite")
    return report


@dataclass
class PoolStats:
    similarities: np.ndarray
    hist: np.ndarray
    bin_edges: np.ndarray
    median: float
    frac_high: float          # fraction with similarity >= 0.85


def pool_similarity_stats(pool, features, bins=20):
    """Max-similarity profile of a feature set against a pool."""
    if pool.n == 0:
        raise ValueError("pool is empty")
    s, _ = candidate_similarity(np.asarray(features, dtype=np.float64), pool)
    hist, edges = np.histogram(s, bins=bins, range=(-1.0, 1.0))
    return PoolStats(similarities=s, hist=hist, bin_edges=edges,
                     median=float(np.median(s)),
                     frac_high=float((s >= 0.85).mean()))


def cross_pool_similarity(a, b):
    """Full pairwise cosine matrix between two pools, plus its mean."""
    if a.width != b.width:
        raise ValueError(f"pool widths differ: {a.width} vs {b.width}")
    mat = _unit_rows(a.entries) @ _unit_rows(b.entries).T
    return mat, float(mat.mean()) if mat.size else 0.0


# -------------------------------------------------------------- registry ----

_SHARINGS = ("sensor", "dataset", "global")


class PoolRegistry:
    """Lazily created pools keyed by sharing mode.

    "sensor" (default): one pool per (sensor kind, stage) — datasets that
    share a sensor kind share pools. "dataset": per (kind, dataset, stage).
    "global": one pool per stage for everything.
    """

    def __init__(self, widths, capacities=DEFAULT_CAPACITIES,
                 epsilon=DEFAULT_EPSILON, lam=DEFAULT_LAMBDA, sharing="sensor"):
        if sharing not in _SHARINGS:
            raise ValueError(f"sharing must be one of {_SHARINGS}, got {sharing!r}")
        if len(widths) != len(capacities):
            raise ValueError("one width and one capacity per stage")
        self.widths = tuple(widths)
        self.capacities = tuple(capacities)
        self.epsilon = epsilon
        self.lam = lam
        self.sharing = sharing
        self.pools = {}

    def _key(self, sensor, stage):
        if self.sharing == "sensor":
            return (sensor.kind.name, stage)
        if self.sharing == "dataset":
            return (sensor.kind.name, sensor.dataset, stage)
        return ("*", stage)

    def get(self, sensor, stage):
        key = self._key(sensor, stage)
        pool = self.pools.get(key)
        if pool is None:
            pool = GeometryPool(capacity=self.capacities[stage],
                                width=self.widths[stage],
                                epsilon=self.epsilon, lam=self.lam,
                                stage=stage, sensor_key=key[0])
            self.pools[key] = pool
        return pool

    def peek(self, sensor, stage):
        """Existing pool or None — read paths must not create pools."""
        return self.pools.get(self._key(sensor, stage))

    def items(self):
        return sorted(self.pools.items())


# ------------------------------------------------------------ persistence ----
# magic "GPOOL1\0\0", u32 version, u32 pool_count, then per pool:
# u8 sensor_kind, u8 stage, u32 capacity, u32 n, u32 C, f32 eps, f32 lam,
# n*C f32 row-major entries. little-endian throughout.

_POOL_MAGIC = b"GPOOL1\0\0"
_POOL_VERSION = 1


def save_pools(registry, path):
    if registry.sharing != "sensor":
        raise ValueError(
            f"only sensor-shared registries are persistable, not {registry.sharing!r}")
    items = registry.items()
    parts = [_POOL_MAGIC, struct.pack("<II", _POOL_VERSION, len(items))]
    for (kind_name, stage), pool in items:
        kind = SensorKind[kind_name].value
        parts.append(struct.pack("<BBIIIff", kind, stage, pool.capacity,
                                 pool.n, pool.width, pool.epsilon, pool.lam))
        parts.append(pool.entries.astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_pools(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    off = 0

    def take(nbytes, what):
        nonlocal off
        if off + nbytes > len(buf):
            raise PoolFormatError(f"truncated {what} at byte {off}")
        out = buf[off:off + nbytes]
        off += nbytes
        return out

    if take(8, "magic") != _POOL_MAGIC:
        raise PoolFormatError("bad magic at byte 0")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != _POOL_VERSION:
        raise PoolFormatError(f"unsupported version {version}")

    found = {}
    max_stage = -1
    header_size = struct.calcsize("<BBIIIff")
    for _ in range(count):
        kind, stage, capacity, n, width, eps, lam = struct.unpack(
            "<BBIIIff", take(header_size, "pool header"))
        if n > capacity:
            raise PoolFormatError(f"entry count {n} exceeds capacity {capacity}")
        entries = np.frombuffer(take(n * width * 4, "pool entries"),
                                dtype="<f4").reshape(n, width).astype(np.float64)
        kind_name = SensorKind(kind).name
        found[(kind_name, stage)] = GeometryPool(
            capacity=capacity, width=width, epsilon=float(eps), lam=float(lam),
            stage=stage, sensor_key=kind_name, entries=entries)
        max_stage = max(max_stage, stage)
    if off != len(buf):
        raise PoolFormatError(f"trailing data at byte {off}")

    stages = max_stage + 1 if max_stage >= 0 else len(DEFAULT_CAPACITIES)
    widths = [1] * stages
    capacities = [1] * stages
    eps = DEFAULT_EPSILON
    lam = DEFAULT_LAMBDA
    for (kind_name, stage), pool in found.items():
        widths[stage] = pool.width
        capacities[stage] = pool.capacity
        eps, lam = pool.epsilon, pool.lam
    registry = PoolRegistry(widths=widths, capacities=capacities,
                            epsilon=eps, lam=lam, sharing="sensor")
    registry.pools = found
    return registry
