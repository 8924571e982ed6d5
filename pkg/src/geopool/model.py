"""Model assembly: sensor-aware embedding, a sparse voxel U-net whose
encoder stages are enriched from geometry pools, an auxiliary point
branch that fills those pools during training, and the joint loss.

The voxel path is the product; the point branch and pool updates exist
only in forward_train. forward_infer runs the identical voxel
computation against frozen pools and touches nothing else.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import fusion as fu
from . import pointnet as pn
from . import voxelgrid as vg
from .layers import MLP, Linear
from .pointcloud import CHANNELS, SensorKind
from .pools import PoolRegistry, update_pool

_FULL_CHANNELS = (32, 64, 128, 256)
_FULL_LAYERS = (2, 3, 4, 6)
_FULL_DECODER = (256, 128, 96, 96)
_FULL_DEC_LAYERS = (2, 2, 2, 2)
_FULL_CAPACITIES = (32, 64, 128, 256)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    encoder_layers: tuple = _FULL_LAYERS
    encoder_channels: tuple = _FULL_CHANNELS
    decoder_layers: tuple = _FULL_DEC_LAYERS
    decoder_channels: tuple = _FULL_DECODER
    embedding_channels: int = 32
    voxel_size: float = 0.05
    k: int = 16
    lam: float = 0.1
    mu: float = 0.1
    epsilon: float = 0.9
    pool_capacities: tuple = _FULL_CAPACITIES
    max_candidates_factor: int = 4
    patch_cap: int = 20000
    num_classes: int = 4
    seed: int = 0
    pool_sharing: str = "sensor"
    use_fusion: bool = True       # off = plain voxel backbone
    use_hypernet: bool = True     # ladder below: off = directly learned w,b
    use_rel_pos: bool = True
    use_stage_code: bool = True

    def __post_init__(self):
        for name in ("encoder_layers", "encoder_channels", "decoder_layers",
                     "decoder_channels", "pool_capacities"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        lengths = {len(self.encoder_layers), len(self.encoder_channels),
                   len(self.decoder_layers), len(self.decoder_channels),
                   len(self.pool_capacities)}
        if lengths != {len(self.encoder_channels)} or not self.encoder_channels:
            raise ConfigError(f"stage list lengths disagree: {lengths}")
        if self.k < 1 or self.voxel_size <= 0 or self.patch_cap < 1:
            raise ConfigError("k, voxel_size, patch_cap must be positive")
        if self.max_candidates_factor < 1:
            raise ConfigError("max_candidates_factor must be >= 1")

    @property
    def stages(self):
        return len(self.encoder_channels)

    def max_candidates(self, stage):
        return self.pool_capacities[stage] * self.max_candidates_factor

    # fused width leaving stage s (and entering stage s+1 / the skip path)
    def stage_out(self, stage):
        c = self.encoder_channels[stage]
        return 2 * c if self.use_fusion else c


def desk_config(divisor=2, stages=4, **overrides):
    """CI-sized model: halved channels, single conv per stage."""
    if divisor < 1:
        raise ConfigError(f"divisor must be >= 1, got {divisor}")
    if not 1 <= stages <= 4:
        raise ConfigError(f"stages must be 1..4, got {stages}")
    base = dict(
        encoder_layers=(1,) * stages,
        encoder_channels=tuple(c // divisor for c in _FULL_CHANNELS[:stages]),
        decoder_layers=(1,) * stages,
        decoder_channels=tuple(c // divisor for c in _FULL_DECODER[-stages:]),
        pool_capacities=tuple(c // divisor for c in _FULL_CAPACITIES[:stages]),
    )
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class ConvBlock:
    kernel: ad.Value  # 27 x d_in x d_out
    bias: ad.Value

    def parameters(self):
        return [self.kernel, self.bias]


def init_conv(rng, d_in, d_out, dtype=np.float64):
    bound = 1.0 / math.sqrt(27 * d_in)
    return ConvBlock(
        kernel=ad.Value(rng.uniform(-bound, bound, size=(27, d_in, d_out)),
                        dtype=dtype),
        bias=ad.Value(rng.uniform(-bound, bound, size=d_out), dtype=dtype))


@dataclass
class SensorEmbedding:
    point_head: MLP    # raw channels -> embedding width, applied per point
    voxel_head: ConvBlock  # one conv block on the raw voxel grid

    def parameters(self):
        return self.point_head.parameters() + self.voxel_head.parameters()


class ModelParams:
    """Every trainable leaf, grouped the way the forward pass consumes them."""

    def __init__(self, config, kinds=(SensorKind.CameraLike,
                                      SensorKind.LidarLike)):
        self.config = config
        self.kinds = tuple(kinds)
        rng = np.random.default_rng(config.seed)
        emb = config.embedding_channels
        ch = config.encoder_channels

        self.embeddings = {}
        for kind in sorted(self.kinds, key=lambda k: k.value):
            c = CHANNELS[kind]
            self.embeddings[kind] = SensorEmbedding(
                point_head=MLP(rng, (c, emb, emb)),
                voxel_head=init_conv(rng, c, emb))

        self.encoder = []
        width = emb
        for s in range(config.stages):
            blocks = []
            for _ in range(config.encoder_layers[s]):
                blocks.append(init_conv(rng, width, ch[s]))
                width = ch[s]
            self.encoder.append(blocks)
            width = config.stage_out(s)

        self.stage_codes = pn.make_stage_codes(rng, config.stages)
        self.pointnets = []
        self.point_norms = []   # per-stage LN keeps the chain bounded
        pwidth = emb
        for s in range(config.stages):
            self.pointnets.append(pn.make_hypernets(
                rng, pwidth, ch[s], voxel_dim=ch[s],
                use_hypernet=config.use_hypernet,
                use_rel_pos=config.use_rel_pos,
                use_stage_code=config.use_stage_code))
            self.point_norms.append((ad.Value(np.ones(ch[s])),
                                     ad.Value(np.zeros(ch[s]))))
            pwidth = ch[s]

        self.projections = []
        if config.use_fusion:
            for s in range(config.stages):
                self.projections.append(
                    fu.make_projections(rng, voxel_dim=ch[s], pool_dim=ch[s]))

        self.decoder = []
        width = config.stage_out(config.stages - 1)
        for i in range(config.stages):
            level = config.stages - 1 - i
            blocks = []
            d_in = width + config.stage_out(level)
            for _ in range(config.decoder_layers[i]):
                blocks.append(init_conv(rng, d_in, config.decoder_channels[i]))
                d_in = config.decoder_channels[i]
            self.decoder.append(blocks)
            width = config.decoder_channels[i]

        self.head = Linear(rng, width, config.num_classes)
        last = ch[config.stages - 1]
        self.point_decoder = MLP(rng, (last, last, config.num_classes))

        # live on the float32 grid from the start: checkpoints store f32,
        # and an untrained save/load must reproduce the model bitwise
        for _, p in self.named_parameters():
            p.data = p.data.astype(np.float32).astype(np.float64)

    def named_parameters(self):
        out = []

        def grab(prefix, obj):
            for j, p in enumerate(obj.parameters()):
                out.append((f"{prefix}.{j}", p))

        for kind in sorted(self.embeddings, key=lambda k: k.value):
            grab(f"emb.{kind.name}", self.embeddings[kind])
        for s, blocks in enumerate(self.encoder):
            for l, blk in enumerate(blocks):
                grab(f"enc{s}.conv{l}", blk)
        for s, code in enumerate(self.stage_codes):
            out.append((f"code{s}", code))
        for s, nets in enumerate(self.pointnets):
            grab(f"pnet{s}", nets)
        for s, (g, b) in enumerate(self.point_norms):
            out.append((f"pnorm{s}.g", g))
            out.append((f"pnorm{s}.b", b))
        for s, proj in enumerate(self.projections):
            grab(f"attn{s}", proj)
        for i, blocks in enumerate(self.decoder):
            for l, blk in enumerate(blocks):
                grab(f"dec{i}.conv{l}", blk)
        grab("head", self.head)
        grab("pdec", self.point_decoder)
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def pool_registry(self):
        cfg = self.config
        return PoolRegistry(widths=cfg.encoder_channels,
                            capacities=cfg.pool_capacities,
                            epsilon=cfg.epsilon, lam=cfg.lam,
                            sharing=cfg.pool_sharing)


def _embedding_for(params, cloud):
    kind = cloud.sensor.kind
    se = params.embeddings.get(kind)
    if se is None:
        raise ConfigError(f"no embedding head registered for {kind.name}")
    return se, kind


def embed_points(cloud, params):
    se, _ = _embedding_for(params, cloud)
    return se.point_head(ad.Value(cloud.features))


def embed_voxels(grid, params, cloud):
    se, _ = _embedding_for(params, cloud)
    g = vg.sparse_conv3(grid, se.voxel_head.kernel, se.voxel_head.bias)
    return g.with_features(ad.relu(g.features))


def embed(cloud, grid, params):
    """(per-point features, embedded grid, head id actually used)."""
    _, kind = _embedding_for(params, cloud)
    return embed_points(cloud, params), embed_voxels(grid, params, cloud), kind


def _run_blocks(grid, blocks):
    for blk in blocks:
        grid = vg.sparse_conv3(grid, blk.kernel, blk.bias)
        grid = grid.with_features(ad.relu(grid.features))
    return grid


def _stage_seed(seed, stage):
    return seed * 131 + stage


@dataclass
class ForwardOut:
    voxel_logits: ad.Value          # scene points x classes (devoxelized)
    point_logits: ad.Value = None   # patch points x classes (training only)
    grid0: object = None            # finest grid (carries point->voxel rows)
    reports: list = field(default_factory=list)
    cold_stages: list = field(default_factory=list)
    stage_candidates: list = field(default_factory=list)  # raw arrays, patch runs only


def _encode_decode(scene, params, registry, seed, patch=None,
                   update_pools=False):
    """Shared forward walk. With a patch the point branch runs alongside the
    encoder and (optionally) mutates the pools; without one this is the pure
    voxel path."""
    cfg = params.config
    grid_raw = vg.voxelize(scene, cfg.voxel_size)
    g = embed_voxels(grid_raw, params, scene)
    grid0 = g
    out = ForwardOut(voxel_logits=None, grid0=grid0)

    if patch is not None:
        pf = embed_points(patch, params)
        pv = vg.voxel_rows(grid_raw, patch.positions)
        lists = None

    skips = []
    for s in range(cfg.stages):
        g = _run_blocks(g, params.encoder[s])
        if patch is not None:
            build = pn.build_candidates(
                patch.positions, pf, g, pv, params.stage_codes[s],
                params.pointnets[s], k=cfg.k,
                max_candidates=cfg.max_candidates(s),
                seed=_stage_seed(seed, s), lists=lists)
            pf = ad.layer_norm(build.point_feats, *params.point_norms[s])
            lists = build.lists
            out.stage_candidates.append(build.candidates.data)
            if update_pools:
                # pools hold unit-norm prototypes: they are compared by
                # cosine, and bounded entries keep attention finite no
                # matter how hot the point branch runs
                cand = build.candidates.data
                unit = cand / np.maximum(
                    np.linalg.norm(cand, axis=1, keepdims=True), 1e-12)
                out.reports.append(update_pool(
                    registry.get(scene.sensor, s), unit,
                    seed=_stage_seed(seed, s)))
        if cfg.use_fusion:
            pool = registry.peek(scene.sensor, s) if registry is not None else None
            geo, cold = fu.attend(g.features, pool, params.projections[s])
            out.cold_stages.append(cold)
            g = g.with_features(fu.fuse(g.features, geo))
        skips.append(g)
        g = vg.downsample(g)
        if patch is not None:
            pv = g.child_map[pv]

    for i in range(cfg.stages):
        child = skips[cfg.stages - 1 - i]
        up = vg.upsample_to(g, child)
        x = ad.concat_cols([up.features, child.features])
        g = _run_blocks(child.with_features(x), params.decoder[i])

    logits = params.head(g.features)
    out.voxel_logits = vg.devoxelize(g.with_features(logits), scene)
    if patch is not None:
        out.point_logits = params.point_decoder(pf)
    return out


def forward_train(scene, patch, params, registry, seed=0, update_pools=True):
    """Full training pass: voxel path + point branch + pool updates."""
    if patch.sensor.kind != scene.sensor.kind:
        raise ConfigError("patch and scene disagree on sensor kind")
    return _encode_decode(scene, params, registry, seed, patch=patch,
                          update_pools=update_pools)


def forward_infer(scene, params, registry):
    """Voxel path only, against frozen pools; no graph is retained."""
    with ad.no_grad():
        return _encode_decode(scene, params, registry, seed=0)


def loss(voxel_logits, point_logits, scene_labels, patch_labels, point_voxel,
         mu):
    """Voxel cross-entropy (majority member label per voxel) + mu x point
    cross-entropy over the patch."""
    scene_labels = np.asarray(scene_labels, dtype=np.int64)
    k = voxel_logits.data.shape[1]
    if scene_labels.min() < 0 or scene_labels.max() >= k:
        raise ValueError("scene label outside class range")
    m = int(point_voxel.max()) + 1
    votes = np.zeros((m, k), dtype=np.int64)
    np.add.at(votes, (point_voxel, scene_labels), 1)
    majority = votes.argmax(axis=1)
    _, first = np.unique(point_voxel, return_index=True)
    l_v = ad.cross_entropy_rows(ad.gather_rows(voxel_logits, first), majority)
    if mu == 0.0 or point_logits is None:
        return l_v
    l_p = ad.cross_entropy_rows(point_logits, np.asarray(patch_labels,
                                                         dtype=np.int64))
    return ad.add(l_v, ad.scale(l_p, mu))
