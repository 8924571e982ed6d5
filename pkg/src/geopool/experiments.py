"""Desk-scale studies: the two-sensor quality comparison, the point-branch
ablation ladder, and the pool similarity analyses.

Everything here runs on synthetic scenes in minutes on a CPU. The studies
are directional — they check signs and orderings, not absolute scores.
"""

import statistics
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import model as gm
from . import pools as pl
from . import synth
from . import training as tr
from .pointcloud import SensorId, SensorKind, sample_patch

# Config deltas for each trained variant. Ladder order: each rung enables
# one more conditioning signal of the point branch; "voxel_only" drops the
# branch (and fusion) entirely and is compared against "full".
VARIANTS = {
    "voxel_only":   dict(use_fusion=False, mu=0.0),
    "vanilla":      dict(use_hypernet=False, use_rel_pos=False,
                         use_stage_code=False),
    "voxel_guided": dict(use_rel_pos=False, use_stage_code=False),
    "rel_pos":      dict(use_stage_code=False),
    "full":         dict(),
}

LADDER = ("vanilla", "voxel_guided", "rel_pos", "full")


def synth_dataset(kind, name, seeds, num_classes=4, **scene_kw):
    """One Dataset of standard synthetic scenes captured by `kind`."""
    sensor = SensorId(kind, dataset=name)
    scenes = [synth.synth_scene(
        sensor, synth.standard_scene(s, num_classes=num_classes, **scene_kw),
        seed=s) for s in seeds]
    return tr.Dataset(name=name, scenes=scenes)


def benchmark_data(n_train=3, n_heldout=2, num_classes=4, extent=3.0,
                   n_objects=5, density=220.0):
    """The fixed two-sensor benchmark: camera + lidar train sets and a
    mixed held-out split. Scene seeds are constants — training seeds vary,
    the data never does."""
    kw = dict(num_classes=num_classes, extent=extent, n_objects=n_objects,
              density=density)
    cam = synth_dataset(SensorKind.CameraLike, "cam", range(100, 100 + n_train), **kw)
    lid = synth_dataset(SensorKind.LidarLike, "lid", range(200, 200 + n_train), **kw)
    held = (synth_dataset(SensorKind.CameraLike, "cam", range(300, 300 + n_heldout), **kw).scenes
            + synth_dataset(SensorKind.LidarLike, "lid", range(400, 400 + n_heldout), **kw).scenes)
    return [cam, lid], held


def study_config(**overrides):
    """Model size used by the desk studies unless a caller overrides it."""
    base = dict(voxel_size=0.12, k=8, patch_cap=2048, num_classes=4)
    base.update(overrides)
    return gm.desk_config(divisor=2, stages=3, **base)


@dataclass
class VariantScore:
    label: str
    miou: float                 # median over seeds
    macc: float
    per_seed: list              # final-epoch LogRows, one per seed


def quality_study(variants=("voxel_only",) + LADDER, seeds=(0, 1, 2),
                  config=None, epochs=3, lr=0.05, data=None, **train_kw):
    """Train every variant with each seed on the fixed benchmark; score the
    held-out split after the last epoch and take per-variant medians."""
    config = config or study_config()
    datasets, heldout = data if data is not None else benchmark_data()
    out = {}
    for label in variants:
        rows = []
        for seed in seeds:
            cfg = replace(config, seed=seed, **VARIANTS[label])
            res = tr.train(cfg, datasets, epochs=epochs, heldout=heldout,
                           lr=lr, **train_kw)
            rows.append(res.log[-1])
        out[label] = VariantScore(
            label=label,
            miou=statistics.median(r.miou for r in rows),
            macc=statistics.median(r.macc for r in rows),
            per_seed=rows)
    return out


def format_scores(scores, order=None):
    order = order or list(scores)
    lines = ["variant,miou,macc"]
    for label in order:
        s = scores[label]
        lines.append(f"{label},{s.miou:.6f},{s.macc:.6f}")
    return "\n".join(lines) + "\n"


# ------------------------------------------------------- pool analyses ----

@dataclass
class StageSimilarity:
    stage: int
    cam_cam: float      # mean cosine between the two camera-trained pools
    cam_lidar: float    # mean over both camera x lidar pairs


def sensor_pool_study(config=None, seed=0, n_scenes=3, epochs=2, lr=0.05,
                      **scene_kw):
    """Joint training on two camera datasets and one lidar dataset with
    per-dataset pools; returns the trained result plus per-stage mean
    cross-pool similarities (camera-camera vs camera-lidar)."""
    config = replace(config or study_config(), pool_sharing="dataset",
                     seed=seed)
    kw = dict(num_classes=config.num_classes, **scene_kw)
    dsa = synth_dataset(SensorKind.CameraLike, "camA", range(500, 500 + n_scenes), **kw)
    dsb = synth_dataset(SensorKind.CameraLike, "camB", range(600, 600 + n_scenes), **kw)
    dsc = synth_dataset(SensorKind.LidarLike, "lidC", range(700, 700 + n_scenes), **kw)
    res = tr.train(config, [dsa, dsb, dsc], epochs=epochs, lr=lr)

    ids = {name: SensorId(kind, dataset=name) for name, kind in
           (("camA", SensorKind.CameraLike), ("camB", SensorKind.CameraLike),
            ("lidC", SensorKind.LidarLike))}
    rows = []
    for s in range(config.stages):
        pa = res.registry.peek(ids["camA"], s)
        pb = res.registry.peek(ids["camB"], s)
        pc = res.registry.peek(ids["lidC"], s)
        if pa is None or pb is None or pc is None:
            raise RuntimeError(f"stage {s} pool missing after training")
        _, cc = pl.cross_pool_similarity(pa, pb)
        _, ca = pl.cross_pool_similarity(pa, pc)
        _, cb = pl.cross_pool_similarity(pb, pc)
        rows.append(StageSimilarity(stage=s, cam_cam=cc,
                                    cam_lidar=0.5 * (ca + cb)))
    return res, rows


def pool_representativeness(params, registry, scenes, seed=0):
    """How well the trained pools cover candidates from unseen scenes.

    Runs the point branch (frozen pools) over each scene's patch, collects
    the per-stage candidate features, and profiles them against the pool
    the scene's sensor would read. Keys: (sensor, stage) -> PoolStats.
    """
    chunks = {}
    with ad.no_grad():
        for i, scene in enumerate(scenes):
            patch = sample_patch(scene, params.config.patch_cap,
                                 seed=seed + i)
            out = gm.forward_train(scene, patch, params, registry,
                                   seed=seed + i, update_pools=False)
            for s, cand in enumerate(out.stage_candidates):
                chunks.setdefault((scene.sensor, s), []).append(cand)
    stats = {}
    for (sensor, s), parts in sorted(chunks.items(),
                                     key=lambda kv: (str(kv[0][0]), kv[0][1])):
        pool = registry.peek(sensor, s)
        if pool is None or pool.n == 0:
            raise RuntimeError(
                f"no trained pool for sensor {sensor} stage {s}")
        stats[(sensor, s)] = pl.pool_similarity_stats(
            pool, np.concatenate(parts))
    return stats


def overall_median_similarity(stats):
    """Median max-similarity pooled over every (sensor, stage) profile."""
    allsims = np.concatenate([st.similarities for st in stats.values()])
    return float(np.median(allsims))


def format_hist(stats):
    """Histogram rows: sensor, stage, bin bounds, count. Counts per profile
    sum to that profile's feature count."""
    lines = ["sensor,stage,bin_lo,bin_hi,count"]
    for (sensor, s), st in stats.items():
        tag = sensor.kind.name + (f":{sensor.dataset}" if sensor.dataset else "")
        for lo, hi, c in zip(st.bin_edges[:-1], st.bin_edges[1:], st.hist):
            lines.append(f"{tag},{s},{lo:.3f},{hi:.3f},{int(c)}")
    return "\n".join(lines) + "\n"
