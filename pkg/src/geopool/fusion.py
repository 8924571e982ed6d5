"""Geometry-to-voxel fusion.

Each voxel feature queries the stage's geometry pool through scaled
dot-product cross-attention; the attended geometric feature is then
concatenated onto the voxel stream. Pool entries act as fixed keys and
values — gradients stop at the pool boundary.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .layers import Linear


@dataclass
class AttentionProjections:
    h_q: Linear  # voxel width  -> d_k
    h_k: Linear  # pool width   -> d_k
    h_v: Linear  # pool width   -> d_v

    @property
    def d_k(self):
        return self.h_q.w.data.shape[1]

    @property
    def d_v(self):
        return self.h_v.w.data.shape[1]

    def parameters(self):
        return (self.h_q.parameters() + self.h_k.parameters()
                + self.h_v.parameters())


def make_projections(rng, voxel_dim, pool_dim, d_k=None, d_v=None,
                     dtype=np.float64):
    """Query/key/value maps for one stage; widths default to voxel_dim."""
    d_k = voxel_dim if d_k is None else d_k
    d_v = voxel_dim if d_v is None else d_v
    return AttentionProjections(h_q=Linear(rng, voxel_dim, d_k, dtype),
                                h_k=Linear(rng, pool_dim, d_k, dtype),
                                h_v=Linear(rng, pool_dim, d_v, dtype))


def normalize_entries(entries):
    """Center and scale each entry row before projection.

    Rectified features share a large positive mean direction; without
    centering, every key is nearly the same vector, the softmax comes out
    uniform, and no gradient reaches the projections."""
    mu = entries.mean(axis=1, keepdims=True)
    sd = entries.std(axis=1, keepdims=True)
    return (entries - mu) / np.maximum(sd, 1e-6)


def attend(voxel_feats, pool, proj):
    """Cross-attention of voxel queries into the pool -> (M x d_v, flag).

    The flag is True when the pool had nothing to offer (cold start) and
    the output is all-zero. Keys/values are recomputed on every call from
    the pool entries (normalized per row, see normalize_entries); the
    entries themselves stay constant.
    """
    m, d = voxel_feats.data.shape
    if proj.h_q.w.data.shape[0] != d:
        raise ad.DimensionError(
            f"voxel width {d} vs query projection {proj.h_q.w.data.shape}")
    if pool is None or pool.n == 0:
        zeros = np.zeros((m, proj.d_v), dtype=voxel_feats.data.dtype)
        return ad.Value(zeros), True
    if pool.width != proj.h_k.w.data.shape[0]:
        raise ad.DimensionError(
            f"pool width {pool.width} vs key projection {proj.h_k.w.data.shape}")
    entries = ad.Value(normalize_entries(pool.entries),
                       dtype=voxel_feats.data.dtype)
    q = proj.h_q(voxel_feats)
    k = proj.h_k(entries)
    v = proj.h_v(entries)
    weights = ad.softmax_rows(ad.matmul(q, ad.transpose(k)),
                              math.sqrt(proj.d_k))
    return ad.matmul(weights, v), False


def fuse(voxel_feats, geo_feats):
    """Concatenate attended geometry onto the voxel stream (M x (D + d_v))."""
    if voxel_feats.data.shape[0] != geo_feats.data.shape[0]:
        raise ad.DimensionError(
            f"{voxel_feats.data.shape[0]} voxel rows vs"
            f" {geo_feats.data.shape[0]} geometry rows")
    return ad.concat_cols([voxel_feats, geo_feats])
