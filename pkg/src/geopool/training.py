"""Optimization: momentum SGD with linear warmup, the scene-level training
loop with per-step dataset mixing, and epoch scoring on a held-out split.

Trained state is canonicalized onto the float32 grid when the loop
finishes, so writing it to disk (which stores float32) and reloading it
reproduces the in-memory model exactly.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import model as gm
from .metrics import evaluate_miou
from .pointcloud import sample_patch


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class SGD:
    """Momentum SGD with L2 weight decay folded into the gradient.

    max_grad_norm, when set, rescales the whole gradient so its global L2
    norm never exceeds it — one hot batch then cannot launch the weights.
    """

    def __init__(self, values, lr=0.05, momentum=0.9, weight_decay=1e-4,
                 max_grad_norm=None):
        self.values = list(values)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.max_grad_norm = max_grad_norm
        self.velocity = [np.zeros_like(v.data) for v in self.values]

    def zero_grad(self):
        for v in self.values:
            v.zero_grad()

    def _clip_scale(self):
        if self.max_grad_norm is None:
            return 1.0
        sq = sum(float((v.grad ** 2).sum())
                 for v in self.values if v.grad is not None)
        total = math.sqrt(sq)
        if total <= self.max_grad_norm:
            return 1.0
        return self.max_grad_norm / total

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        scale = self._clip_scale()
        for v, vel in zip(self.values, self.velocity):
            if v.grad is None:
                continue
            g = scale * v.grad + self.weight_decay * v.data
            vel *= self.momentum
            vel += g
            v.data -= lr * vel


def warmup_lr(step, total_steps, base, frac=0.05):
    """Linear ramp over the first `frac` of all steps, then constant."""
    warm = max(1, int(round(total_steps * frac)))
    if step < warm:
        return base * (step + 1) / warm
    return base


@dataclass
class Dataset:
    name: str
    scenes: list
    weight: float = 1.0   # relative per-step sampling ratio


@dataclass
class LogRow:
    epoch: int
    split: str
    loss: float
    miou: float
    macc: float

    def csv(self):
        return (f"{self.epoch},{self.split},{self.loss:.6f},"
                f"{self.miou:.6f},{self.macc:.6f}")


def format_log(rows):
    return "\n".join(["epoch,split,loss,miou,macc"]
                     + [r.csv() for r in rows]) + "\n"


@dataclass
class TrainResult:
    params: gm.ModelParams
    registry: object
    log: list = field(default_factory=list)


def _quantize(arr):
    return arr.astype(np.float32).astype(np.float64)


def canonicalize(params, registry):
    """Snap trained state onto the float32 grid (the on-disk precision)."""
    for _, p in params.named_parameters():
        p.data = _quantize(p.data)
    for _, pool in registry.items():
        pool.entries = _quantize(pool.entries)


def score_scenes(scenes, params, registry):
    preds, labels = [], []
    for scene in scenes:
        out = gm.forward_infer(scene, params, registry)
        preds.append(out.voxel_logits.data.argmax(axis=1))
        labels.append(scene.labels)
    return evaluate_miou(np.concatenate(preds), np.concatenate(labels),
                         num_classes=params.config.num_classes)


def train(config, datasets, epochs=1, heldout=None, lr=0.05, momentum=0.9,
          weight_decay=1e-4, warmup_frac=0.05, pool_update_stride=1,
          max_grad_norm=None, kinds=None, params=None, registry=None):
    """Fit a model on synthetic scene datasets; returns params, pools, log.

    `datasets` is a list of Dataset records; each step samples one by
    weight, then a scene uniformly inside it. `heldout` scenes are scored
    after every epoch (falling back to the training scenes when omitted).
    """
    if not datasets:
        raise ValueError("need at least one dataset")
    if kinds is None:
        kinds = tuple(dict.fromkeys(
            ds.scenes[0].sensor.kind for ds in datasets))
    if params is None:
        params = gm.ModelParams(config, kinds=kinds)
    if registry is None:
        registry = params.pool_registry()

    opt = SGD(params.parameters(), lr=lr, momentum=momentum,
              weight_decay=weight_decay, max_grad_norm=max_grad_norm)
    rng = np.random.default_rng(config.seed)
    weights = np.array([ds.weight for ds in datasets], dtype=np.float64)
    probs = weights / weights.sum()
    steps_per_epoch = sum(len(ds.scenes) for ds in datasets)
    total_steps = steps_per_epoch * epochs

    log = []
    step = 0
    for epoch in range(epochs):
        losses = []
        for _ in range(steps_per_epoch):
            ds = datasets[int(rng.choice(len(datasets), p=probs))]
            scene = ds.scenes[int(rng.integers(len(ds.scenes)))]
            patch = sample_patch(scene, config.patch_cap,
                                 seed=int(rng.integers(1 << 31)))
            try:
                out = gm.forward_train(
                    scene, patch, params, registry, seed=step,
                    update_pools=(step % pool_update_stride == 0))
                total = gm.loss(out.voxel_logits, out.point_logits,
                                scene.labels, patch.labels,
                                out.grid0.point_voxel, mu=config.mu)
            except ad.NumericError as e:
                raise DivergenceError(
                    f"non-finite forward at step {step} "
                    f"(epoch {epoch}, dataset {ds.name!r}): {e}") from e
            value = float(total.data)
            if not math.isfinite(value):
                raise DivergenceError(
                    f"non-finite loss {value} at step {step} "
                    f"(epoch {epoch}, dataset {ds.name!r})")
            losses.append(value)
            opt.zero_grad()
            ad.backward(total)
            opt.step(lr=warmup_lr(step, total_steps, lr, warmup_frac))
            step += 1
        try:
            scored = score_scenes(heldout if heldout else
                                  [s for ds in datasets for s in ds.scenes],
                                  params, registry)
        except ad.NumericError as e:
            raise DivergenceError(
                f"non-finite evaluation after epoch {epoch}: {e}") from e
        log.append(LogRow(epoch=epoch,
                          split="heldout" if heldout else "train",
                          loss=float(np.mean(losses)),
                          miou=scored.miou, macc=scored.macc))

    canonicalize(params, registry)
    return TrainResult(params=params, registry=registry, log=log)
