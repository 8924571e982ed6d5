"""Batch command-line workflows: train, infer, bench, analyze.

Config files are UTF-8 lines of key=value; '#' starts a comment. Unknown
keys are rejected. Every run echoes its fully resolved configuration into
the output directory so results stay reproducible from the artifacts.

Exit codes: 0 success, 2 usage or configuration problem, 3 runtime
failure (e.g. training divergence). GEOPOOL_THREADS caps kernel threads;
GEOPOOL_NO_NUMBA=1 forces the pure-numpy kernel fallbacks.
"""

import argparse
import glob as globmod
import sys
from pathlib import Path

import numpy as np

from . import benchmark as gb
from . import checkpoint as ck
from . import experiments as ex
from . import model as gm
from . import pools as pl
from . import synth
from . import training as tr
from .instrumentation import counters
from .metrics import evaluate_miou
from .pointcloud import (ParseError, PointCloud, SensorId, SensorKind,
                         load_cloud, save_rawbin)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class CliError(ValueError):
    """Bad flags or config content; maps to exit code 2."""


# ------------------------------------------------------------- config ----

_MODEL_KEYS = {
    "divisor": int, "stages": int, "voxel_size": float, "k": int,
    "lam": float, "mu": float, "epsilon": float, "patch_cap": int,
    "num_classes": int, "pool_sharing": str, "use_fusion": bool,
    "use_hypernet": bool, "use_rel_pos": bool, "use_stage_code": bool,
}
_TRAIN_KEYS = {
    "epochs": int, "lr": float, "momentum": float, "weight_decay": float,
    "warmup_frac": float, "pool_update_stride": int,
}
_SCENE_KEYS = {"extent": float, "objects": int, "density": float}

_KINDS = {"camera": SensorKind.CameraLike, "lidar": SensorKind.LidarLike}


def _cast(key, raw, want):
    if want is bool:
        low = raw.strip().lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise CliError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return want(raw.strip())
    except ValueError:
        raise CliError(f"{key}: expected {want.__name__}, got {raw!r}") from None


def parse_config(path):
    """key=value lines -> {key: raw string}; comments and blanks skipped."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise CliError(f"cannot read config {path}: {e}") from None
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        key, sep, raw = body.partition("=")
        if not sep:
            raise CliError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key = key.strip()
        if key in out:
            raise CliError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = raw.strip()
    return out


class RunConfig:
    """Resolved run settings: model size, training knobs, data specs."""

    def __init__(self, raw):
        self.model = {}
        self.train = {}
        self.scene = {}
        self.datasets = {}      # name -> {"spec": str, "weight": float}
        self.heldout = []
        self.seed = 0
        for key, val in raw.items():
            if key == "seed":
                self.seed = _cast(key, val, int)
            elif key in _MODEL_KEYS:
                self.model[key] = _cast(key, val, _MODEL_KEYS[key])
            elif key in _TRAIN_KEYS:
                self.train[key] = _cast(key, val, _TRAIN_KEYS[key])
            elif key.startswith("scene.") and key[6:] in _SCENE_KEYS:
                self.scene[key[6:]] = _cast(key, val, _SCENE_KEYS[key[6:]])
            elif key == "heldout":
                self.heldout = [tok.strip() for tok in val.split(",") if tok.strip()]
            elif key.startswith("dataset."):
                rest = key[8:]
                if rest.endswith(".weight"):
                    name = rest[:-7]
                    self.datasets.setdefault(name, {})["weight"] = \
                        _cast(key, val, float)
                elif "." not in rest and rest:
                    self.datasets.setdefault(rest, {})["spec"] = val
                else:
                    raise CliError(f"unknown config key {key!r}")
            else:
                raise CliError(f"unknown config key {key!r}")
        for name, entry in self.datasets.items():
            if "spec" not in entry:
                raise CliError(f"dataset.{name}.weight without dataset.{name}")
            entry.setdefault("weight", 1.0)

    def resolved_lines(self, desk):
        lines = [f"seed={self.seed}", f"desk_scale={desk}"]
        for key in sorted(self.model):
            lines.append(f"{key}={self.model[key]}")
        for key in sorted(self.train):
            lines.append(f"{key}={self.train[key]}")
        for key in sorted(self.scene):
            lines.append(f"scene.{key}={self.scene[key]}")
        for name in sorted(self.datasets):
            entry = self.datasets[name]
            lines.append(f"dataset.{name}={entry['spec']}")
            lines.append(f"dataset.{name}.weight={entry['weight']}")
        if self.heldout:
            lines.append("heldout=" + ",".join(self.heldout))
        return "\n".join(lines) + "\n"

    def model_config(self, desk, seed=None):
        kw = dict(self.model)
        kw["seed"] = self.seed if seed is None else seed
        if desk:
            return gm.desk_config(divisor=kw.pop("divisor", 2),
                                  stages=kw.pop("stages", 4), **kw)
        for bad in ("divisor", "stages"):
            if bad in kw:
                raise CliError(f"{bad} requires --desk-scale")
        return gm.ModelConfig(**kw)

    def scene_kw(self):
        kw = {}
        if "extent" in self.scene:
            kw["extent"] = self.scene["extent"]
        if "objects" in self.scene:
            kw["n_objects"] = self.scene["objects"]
        if "density" in self.scene:
            kw["density"] = self.scene["density"]
        return kw


def _build_scenes(name, spec, num_classes, scene_kw):
    """Materialize one data spec: synth:<kind>:<count>:<seed0> or files:<glob>."""
    head, _, rest = spec.partition(":")
    if head == "synth":
        parts = rest.split(":")
        if len(parts) != 3 or parts[0] not in _KINDS:
            raise CliError(
                f"dataset {name}: want synth:<camera|lidar>:<count>:<seed0>,"
                f" got {spec!r}")
        kind = _KINDS[parts[0]]
        count = _cast(name, parts[1], int)
        seed0 = _cast(name, parts[2], int)
        sensor = SensorId(kind, dataset=name)
        return [synth.synth_scene(
            sensor, synth.standard_scene(s, num_classes=num_classes,
                                         **scene_kw), seed=s)
            for s in range(seed0, seed0 + count)]
    if head == "files":
        paths = sorted(globmod.glob(rest))
        if not paths:
            raise CliError(f"dataset {name}: no files match {rest!r}")
        return [load_cloud(p, dataset=name) for p in paths]
    raise CliError(f"dataset {name}: unknown spec kind {head!r}")


def _build_data(run, config):
    if not run.datasets:
        raise CliError("config defines no datasets")
    datasets = []
    for name in sorted(run.datasets):
        entry = run.datasets[name]
        scenes = _build_scenes(name, entry["spec"], config.num_classes,
                               run.scene_kw())
        for s in scenes:
            if s.labels is None:
                raise CliError(f"dataset {name}: scenes need labels to train")
        datasets.append(tr.Dataset(name=name, scenes=scenes,
                                   weight=entry["weight"]))
    heldout = []
    for i, spec in enumerate(run.heldout):
        heldout.extend(_build_scenes(f"heldout{i}", spec,
                                     config.num_classes, run.scene_kw()))
    return datasets, heldout or None


# ----------------------------------------------------------- commands ----

def cmd_train(args):
    run = RunConfig(parse_config(args.config))
    if args.seed is not None:
        run.seed = args.seed
    if args.epochs is not None:
        run.train["epochs"] = args.epochs
    config = run.model_config(args.desk_scale)
    datasets, heldout = _build_data(run, config)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(run.resolved_lines(args.desk_scale),
                                         encoding="utf-8")
    res = tr.train(config, datasets, heldout=heldout, **run.train)
    ck.save_checkpoint(out / "model.ckpt", res.params)
    if res.registry.sharing == "sensor":
        pl.save_pools(res.registry, out / "pools.bin")
    else:
        print(f"note: pool_sharing={res.registry.sharing!r} snapshots are "
              "not persistable; skipping pools.bin", file=sys.stderr)
    (out / "metrics.csv").write_text(tr.format_log(res.log),
                                     encoding="utf-8")
    last = res.log[-1]
    print(f"trained {run.train.get('epochs', 1)} epoch(s): "
          f"loss {last.loss:.4f} miou {last.miou:.4f} -> {out}")
    return EXIT_OK


def cmd_infer(args):
    params = ck.load_checkpoint(args.model)
    if args.pools:
        registry = pl.load_pools(args.pools)
    else:
        print("warning: no --pools given; attention runs against empty "
              "pools (cold start)", file=sys.stderr)
        registry = params.pool_registry()
    cloud = load_cloud(args.input)
    before = (counters.point_branch_total(), counters.pool_mutations)
    out = gm.forward_infer(cloud, params, registry)
    branch_ops = counters.point_branch_total() - before[0]
    mutations = counters.pool_mutations - before[1]
    pred = out.voxel_logits.data.argmax(axis=1).astype(np.int64)
    save_rawbin(PointCloud(positions=cloud.positions, features=cloud.features,
                           sensor=cloud.sensor, labels=pred), args.output)
    print(f"point-branch ops during inference: {branch_ops}; "
          f"pool mutations: {mutations}")
    if cloud.labels is not None:
        scores = evaluate_miou(pred, cloud.labels,
                               num_classes=params.config.num_classes)
        print(f"miou={scores.miou:.6f} macc={scores.macc:.6f}")
    print(f"wrote {args.output}")
    return EXIT_OK


def cmd_bench(args):
    params = ck.load_checkpoint(args.model)
    registry = pl.load_pools(args.pools) if args.pools \
        else params.pool_registry()
    cloud = load_cloud(args.input)
    if args.compare_voxel_only:
        rep = gb.compare_voxel_only(cloud, params, registry,
                                    warmup=args.warmup, iters=args.iters)
        print(rep.csv(), end="")
    else:
        r = gb.bench_infer(cloud, params, registry, warmup=args.warmup,
                           iters=args.iters)
        print("variant,mean_ms,throughput,iters,warmup")
        print(f"model,{r.mean_ms:.6f},{r.throughput:.6f},{r.iters},{r.warmup}")
    return EXIT_OK


def _analyze_out(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_pool_hist(args):
    params = ck.load_checkpoint(args.model)
    registry = pl.load_pools(args.pools)
    run = RunConfig(parse_config(args.config))
    if args.seed is not None:
        run.seed = args.seed
    if not run.heldout:
        raise CliError("pool-hist needs heldout= scenes in the config")
    scenes = []
    for i, spec in enumerate(run.heldout):
        scenes.extend(_build_scenes(f"heldout{i}", spec,
                                    params.config.num_classes,
                                    run.scene_kw()))
    stats = ex.pool_representativeness(params, registry, scenes,
                                       seed=run.seed)
    out = _analyze_out(args)
    (out / "pool_hist.csv").write_text(ex.format_hist(stats),
                                       encoding="utf-8")
    med = ex.overall_median_similarity(stats)
    print(f"median max-similarity {med:.4f} over "
          f"{sum(s.similarities.size for s in stats.values())} features "
          f"-> {out / 'pool_hist.csv'}")
    return EXIT_OK


def cmd_pool_cross(args):
    run = RunConfig(parse_config(args.config))
    if args.seed is not None:
        run.seed = args.seed
    config = run.model_config(args.desk_scale, seed=run.seed)
    res, rows = ex.sensor_pool_study(config=config, seed=run.seed,
                                     epochs=run.train.get("epochs", 2),
                                     lr=run.train.get("lr", 0.05),
                                     **run.scene_kw())
    out = _analyze_out(args)
    lines = ["stage,cam_cam,cam_lidar"]
    for r in rows:
        lines.append(f"{r.stage},{r.cam_cam:.6f},{r.cam_lidar:.6f}")
    (out / "pool_cross.csv").write_text("\n".join(lines) + "\n",
                                        encoding="utf-8")
    for (key, pool) in res.registry.items():
        mat, _ = pl.cross_pool_similarity(pool, pool)
        name = "_".join(str(k) for k in key)
        np.savetxt(out / f"self_{name}.csv", mat, delimiter=",", fmt="%.6f")
    for r in rows:
        print(f"stage {r.stage}: cam-cam {r.cam_cam:.4f} "
              f"cam-lidar {r.cam_lidar:.4f}")
    print(f"-> {out}")
    return EXIT_OK


def cmd_ablate(args):
    run = RunConfig(parse_config(args.config))
    if args.seed is not None:
        run.seed = args.seed
    config = run.model_config(args.desk_scale, seed=run.seed)
    datasets, heldout = _build_data(run, config)
    seeds = tuple(run.seed + i for i in range(3))
    scores = ex.quality_study(variants=ex.LADDER, seeds=seeds, config=config,
                              epochs=run.train.get("epochs", 3),
                              lr=run.train.get("lr", 0.05),
                              data=(datasets, heldout or
                                    [s for ds in datasets for s in ds.scenes]))
    out = _analyze_out(args)
    lines = ["variant,hypernet,rel_pos,stage_code,miou,macc"]
    for label in ex.LADDER:
        flags = {**dict(use_hypernet=True, use_rel_pos=True,
                        use_stage_code=True), **ex.VARIANTS[label]}
        s = scores[label]
        lines.append(f"{label},{flags['use_hypernet']},{flags['use_rel_pos']},"
                     f"{flags['use_stage_code']},{s.miou:.6f},{s.macc:.6f}")
    (out / "ablation.csv").write_text("\n".join(lines) + "\n",
                                      encoding="utf-8")
    for line in lines:
        print(line)
    print(f"-> {out / 'ablation.csv'}")
    return EXIT_OK


# --------------------------------------------------------------- wiring ----

def build_parser():
    p = argparse.ArgumentParser(
        prog="geopool",
        description="Train, run, and analyze the geometry-pool segmentation "
                    "model.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="fit a model on configured datasets")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--desk-scale", action="store_true")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="label a cloud file with a checkpoint")
    i.add_argument("--model", required=True)
    i.add_argument("--pools", default=None)
    i.add_argument("--input", required=True)
    i.add_argument("--output", required=True)
    i.set_defaults(func=cmd_infer)

    b = sub.add_parser("bench", help="time inference on a cloud file")
    b.add_argument("--model", required=True)
    b.add_argument("--pools", default=None)
    b.add_argument("--input", required=True)
    b.add_argument("--warmup", type=int, default=gb.DEFAULT_WARMUP)
    b.add_argument("--iters", type=int, default=gb.DEFAULT_ITERS)
    b.add_argument("--compare-voxel-only", action="store_true")
    b.set_defaults(func=cmd_bench)

    a = sub.add_parser("analyze", help="pool and ablation studies")
    asub = a.add_subparsers(dest="analysis", required=True)

    h = asub.add_parser("pool-hist",
                        help="profile held-out features against pools")
    h.add_argument("--model", required=True)
    h.add_argument("--pools", required=True)
    h.add_argument("--config", required=True)
    h.add_argument("--out", required=True)
    h.add_argument("--seed", type=int, default=None)
    h.set_defaults(func=cmd_pool_hist)

    c = asub.add_parser("pool-cross",
                        help="train with per-dataset pools, compare sensors")
    c.add_argument("--config", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--seed", type=int, default=None)
    c.add_argument("--desk-scale", action="store_true")
    c.set_defaults(func=cmd_pool_cross)

    ab = asub.add_parser("ablate",
                         help="train the point-branch ladder, tabulate scores")
    ab.add_argument("--config", required=True)
    ab.add_argument("--out", required=True)
    ab.add_argument("--seed", type=int, default=None)
    ab.add_argument("--desk-scale", action="store_true")
    ab.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, gm.ConfigError, ck.CheckpointError, pl.PoolFormatError,
            ParseError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (tr.DivergenceError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
