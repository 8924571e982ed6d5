"""Voxel-guided dynamic point network.

Small hypernetworks look at where a point sits inside its voxel, at the
voxel's current feature, and at a per-stage latent code, and emit a
per-point affine transform (w, b). The transformed point features are
max-pooled over each point's k nearest neighbors into one pool candidate
per point. An ablation ladder lives in the flags: with everything off,
w and b collapse to directly learned per-stage vectors.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .instrumentation import counters
from .layers import MLP, Linear
from .neighbors import knn_grid

LATENT_DIM = 32
_HP_OUT = 32
_HIDDEN = 64


@dataclass
class HyperNets:
    """Per-stage transform generator; which inputs it uses depends on flags."""

    in_dim: int                  # point feature width going in
    out_dim: int                 # candidate / pool width coming out
    voxel_dim: int
    use_hypernet: bool = True    # off -> directly learned w, b ("vanilla")
    use_rel_pos: bool = True     # feed h_p(p - v) into h_w/h_b
    use_stage_code: bool = True  # modulate by h_s(stage code)
    h_p: Linear = None
    h_s: Linear = None
    h_w: MLP = None
    h_b: MLP = None
    point_mlp: MLP = None
    w_direct: ad.Value = None    # vanilla path
    b_direct: ad.Value = None

    def parameters(self):
        out = []
        for net in (self.h_p, self.h_s, self.h_w, self.h_b, self.point_mlp):
            if net is not None:
                out.extend(net.parameters())
        for v in (self.w_direct, self.b_direct):
            if v is not None:
                out.append(v)
        return out


def make_hypernets(rng, in_dim, out_dim, voxel_dim, use_hypernet=True,
                   use_rel_pos=True, use_stage_code=True, dtype=np.float64):
    nets = HyperNets(in_dim=in_dim, out_dim=out_dim, voxel_dim=voxel_dim,
                     use_hypernet=use_hypernet, use_rel_pos=use_rel_pos,
                     use_stage_code=use_stage_code)
    nets.point_mlp = MLP(rng, (in_dim, in_dim, out_dim), dtype=dtype)
    if use_hypernet:
        cond = voxel_dim
        if use_rel_pos:
            nets.h_p = Linear(rng, 3, _HP_OUT, dtype=dtype)
            cond += _HP_OUT
        nets.h_w = MLP(rng, (cond, _HIDDEN, in_dim), dtype=dtype)
        nets.h_b = MLP(rng, (cond, _HIDDEN, in_dim), dtype=dtype)
        if use_stage_code:
            nets.h_s = Linear(rng, LATENT_DIM, in_dim, dtype=dtype)
            # modulation starts at identity: with small codes h_s(code) ~ 1,
            # so enabling the stage code cannot wreck fresh candidates
            nets.h_s.b.data = np.ones_like(nets.h_s.b.data)
    else:
        nets.w_direct = ad.Value(np.ones(in_dim, dtype=dtype))
        nets.b_direct = ad.Value(np.zeros(in_dim, dtype=dtype))
    return nets


def make_stage_codes(rng, n_stages, dtype=np.float64):
    """One trainable latent row vector per stage, small normal init."""
    return [ad.Value(rng.normal(0.0, 0.01, size=(1, LATENT_DIM)), dtype=dtype)
            for _ in range(n_stages)]


def dynamic_affine(rel_pos, voxel_feats, stage_code, nets):
    """Per-point (w, b), both n x in_dim.

    Full form: w = h_w(concat(h_p(p - v), f_voxel)) ⊙ h_s(code), b likewise
    through h_b. Flags drop terms; with use_hypernet off the same learned
    (w, b) pair is broadcast to every point.
    """
    n = rel_pos.data.shape[0] if isinstance(rel_pos, ad.Value) else rel_pos.shape[0]
    counters.dynamic_affine_calls += n
    if not nets.use_hypernet:
        return ad.tile_rows(nets.w_direct, n), ad.tile_rows(nets.b_direct, n)

    if voxel_feats.data.shape != (n, nets.voxel_dim):
        raise ad.DimensionError(
            f"voxel features {voxel_feats.data.shape} vs {n} points"
            f" x {nets.voxel_dim}")
    if nets.use_rel_pos:
        rel = rel_pos if isinstance(rel_pos, ad.Value) else ad.Value(rel_pos)
        cond = ad.concat_cols([ad.relu(nets.h_p(rel)), voxel_feats])
    else:
        cond = voxel_feats
    w = nets.h_w(cond)
    b = nets.h_b(cond)
    if nets.use_stage_code:
        if stage_code.data.shape != (1, LATENT_DIM):
            raise ad.DimensionError(
                f"stage code {stage_code.data.shape}, want (1, {LATENT_DIM})")
        rows = np.zeros(n, dtype=np.int64)
        mod_w = ad.gather_rows(nets.h_s(stage_code), rows)
        w = ad.mul(w, mod_w)
        b = ad.mul(b, mod_w)
    return w, b


def apply_affine(point_feats, w, b, nets):
    """MLP(w ⊙ f + b) -> n x out_dim."""
    if point_feats.data.shape != w.data.shape:
        raise ad.DimensionError(
            f"features {point_feats.data.shape} vs affine {w.data.shape}")
    return nets.point_mlp(ad.add(ad.mul(w, point_feats), b))


@dataclass
class CandidateBuild:
    candidates: ad.Value          # m x out_dim, m <= max_candidates
    point_feats: ad.Value         # n x out_dim, input to the next stage
    lists: object                 # neighbor lists actually used
    selected: np.ndarray          # rows of point_feats the candidates came from


def build_candidates(positions, point_feats, grid, point_voxel, stage_code,
                     nets, k=16, max_candidates=None, seed=0, lists=None):
    """One pool candidate per (sub-sampled) point.

    positions: n x 3 patch coordinates; point_feats: Value n x in_dim;
    point_voxel: row of `grid` containing each point. Neighbor lists are
    computed here unless passed in (they only depend on positions, so the
    caller reuses them across stages).
    """
    n = positions.shape[0]
    if n == 0:
        raise ValueError("empty patch")
    if k > n:
        raise ValueError(f"k={k} exceeds patch size {n}")
    rel = positions - grid.centers()[point_voxel]
    vfeat = ad.gather_rows(grid.features, point_voxel)
    w, b = dynamic_affine(ad.Value(rel), vfeat, stage_code, nets)
    fhat = apply_affine(point_feats, w, b, nets)
    if lists is None:
        lists = knn_grid(positions, k)
    pooled = ad.group_maxpool(fhat, lists.indices)
    if max_candidates is not None and n > max_candidates:
        selected = np.random.default_rng(seed).choice(n, size=max_candidates,
                                                      replace=False)
        candidates = ad.gather_rows(pooled, selected)
    else:
        selected = np.arange(n, dtype=np.int64)
        candidates = pooled
    counters.candidate_builds += 1
    return CandidateBuild(candidates=candidates, point_feats=fhat,
                          lists=lists, selected=selected)
