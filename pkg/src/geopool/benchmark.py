"""Wall-clock timing of the inference path, with a paired run against the
fusion-free backbone to price the geometry overhead."""

import time
from dataclasses import dataclass, replace

from . import model as gm

DEFAULT_WARMUP = 10
DEFAULT_ITERS = 300


@dataclass
class BenchResult:
    mean_ms: float
    throughput: float     # instances processed per second
    iters: int
    warmup: int


def bench(run, warmup=DEFAULT_WARMUP, iters=DEFAULT_ITERS):
    """`warmup` untimed calls of `run`, then `iters` timed ones."""
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    if warmup < 0:
        raise ValueError(f"warmup must be >= 0, got {warmup}")
    for _ in range(warmup):
        run()
    t0 = time.perf_counter()
    for _ in range(iters):
        run()
    dt = time.perf_counter() - t0
    return BenchResult(mean_ms=dt / iters * 1e3, throughput=iters / dt,
                       iters=iters, warmup=warmup)


def bench_infer(scene, params, registry, warmup=DEFAULT_WARMUP,
                iters=DEFAULT_ITERS):
    return bench(lambda: gm.forward_infer(scene, params, registry),
                 warmup=warmup, iters=iters)


@dataclass
class PairReport:
    full: BenchResult
    voxel_only: BenchResult

    @property
    def ratio(self):
        return self.full.mean_ms / self.voxel_only.mean_ms

    def csv(self):
        lines = ["variant,mean_ms,throughput,iters,warmup"]
        for name, r in (("full", self.full), ("voxel_only", self.voxel_only)):
            lines.append(f"{name},{r.mean_ms:.6f},{r.throughput:.6f},"
                         f"{r.iters},{r.warmup}")
        lines.append(f"ratio,{self.ratio:.6f},,,")
        return "\n".join(lines) + "\n"


def compare_voxel_only(scene, params, registry, warmup=DEFAULT_WARMUP,
                       iters=DEFAULT_ITERS):
    """Time the model against a freshly built fusion-free twin.

    Runtime does not depend on the weight values, so the twin keeps the
    architecture (minus pools and attention) with its own init. The full
    model should be timed with pools populated — attention cost scales
    with pool occupancy, and empty pools would flatter it.
    """
    if not params.config.use_fusion:
        raise ValueError("params already are the voxel-only variant")
    kinds = tuple(sorted(params.embeddings, key=lambda k: k.value))
    lean = gm.ModelParams(replace(params.config, use_fusion=False),
                          kinds=kinds)
    full = bench_infer(scene, params, registry, warmup=warmup, iters=iters)
    vox = bench_infer(scene, lean, None, warmup=warmup, iters=iters)
    return PairReport(full=full, voxel_only=vox)
