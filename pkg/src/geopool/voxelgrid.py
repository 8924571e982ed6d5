"""Sparse voxel grids: voxelization, submanifold 3x3x3 convolution, stride-2
pooling, and point<->voxel transfer.

Storage is columnar: voxel integer indices live in one sorted packed-key
array, features in one autodiff matrix, so neighbor lookup is a binary
search and convolution is gather -> matmul -> scatter per kernel offset.
The (i,j,k) -> record hash view exists for inspection; the hot path never
builds it.
"""

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

_BIAS = 1 << 20   # supported index range per axis: (-2^20, 2^20)
_SHIFT = 21

OFFSETS = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.int64)
CENTER_OFFSET = 13  # OFFSETS[13] == (0, 0, 0)


def pack_keys(indices):
    """Three voxel indices -> one sortable int64 key."""
    if indices.size and (np.abs(indices).max() >= _BIAS):
        raise ValueError("voxel index outside packable range")
    i = indices.astype(np.int64) + _BIAS
    return (i[:, 0] << (2 * _SHIFT)) | (i[:, 1] << _SHIFT) | i[:, 2]


def unpack_keys(keys):
    mask = (1 << _SHIFT) - 1
    out = np.empty((keys.shape[0], 3), dtype=np.int64)
    out[:, 2] = (keys & mask) - _BIAS
    out[:, 1] = ((keys >> _SHIFT) & mask) - _BIAS
    out[:, 0] = (keys >> (2 * _SHIFT)) - _BIAS
    return out


@dataclass
class VoxelRecord:
    """Hash-view of one voxel; a window into the columnar arrays."""

    feature: np.ndarray
    center: np.ndarray
    members: np.ndarray


@dataclass
class VoxelGrid:
    voxel_size: float
    keys: np.ndarray              # m sorted packed keys
    indices: np.ndarray           # m×3 int voxel coordinates
    features: ad.Value            # m×D
    stage: int = 0
    point_voxel: np.ndarray = None    # n point -> voxel row (stage-0 lineage)
    member_order: np.ndarray = None   # point rows grouped by voxel (CSR)
    member_starts: np.ndarray = None
    child_map: np.ndarray = None      # len m_child: child row -> row in this grid
    _conv_pairs: dict = field(default_factory=dict, repr=False)

    @property
    def m(self):
        return self.keys.shape[0]

    @property
    def width(self):
        return self.features.data.shape[1]

    def centers(self):
        return (self.indices + 0.5) * self.voxel_size

    def members_of(self, row):
        if self.member_order is None:
            return np.empty(0, dtype=np.int64)
        return self.member_order[self.member_starts[row]:self.member_starts[row + 1]]

    def index_map(self):
        """(i,j,k) -> VoxelRecord dict view; for inspection and tests."""
        cent = self.centers()
        return {
            tuple(self.indices[r]): VoxelRecord(
                feature=self.features.data[r],
                center=cent[r],
                members=self.members_of(r))
            for r in range(self.m)
        }

    def with_features(self, new_features):
        """Same structure, different feature matrix (stays in the autodiff graph)."""
        if new_features.data.shape[0] != self.m:
            raise ad.DimensionError(
                f"feature rows {new_features.data.shape} != {self.m} voxels")
        return VoxelGrid(
            voxel_size=self.voxel_size, keys=self.keys, indices=self.indices,
            features=new_features, stage=self.stage,
            point_voxel=self.point_voxel, member_order=self.member_order,
            member_starts=self.member_starts, child_map=self.child_map,
            _conv_pairs=self._conv_pairs)

    def conv_pairs(self, offset_row):
        """(src_rows, dst_rows) pair table for one 3x3x3 offset, cached."""
        hit = self._conv_pairs.get(offset_row)
        if hit is None:
            nkey = pack_keys(self.indices + OFFSETS[offset_row])
            pos = np.searchsorted(self.keys, nkey)
            pos_c = np.minimum(pos, self.m - 1)
            valid = self.keys[pos_c] == nkey
            hit = (pos_c[valid], np.nonzero(valid)[0])
            self._conv_pairs[offset_row] = hit
        return hit


def voxelize(cloud, voxel_size, embeddings=None):
    """Bin points into cubes of the given size; voxel feature = mean of members.

    ``embeddings`` (Value or array, n×D) overrides the averaged quantity;
    default is the cloud's raw feature channels.
    """
    if voxel_size <= 0:
        raise ValueError(f"voxel_size must be positive, got {voxel_size}")
    pos = cloud.positions
    if not np.isfinite(pos).all():
        raise ValueError("non-finite point coordinates")
    if pos.shape[0] == 0:
        raise ValueError("cannot voxelize an empty cloud")
    if embeddings is None:
        embeddings = ad.Value(cloud.features)
    elif not isinstance(embeddings, ad.Value):
        embeddings = ad.Value(np.asarray(embeddings))
    if embeddings.data.shape[0] != pos.shape[0]:
        raise ad.DimensionError(
            f"{embeddings.data.shape[0]} embeddings for {pos.shape[0]} points")

    idx = np.floor(pos / voxel_size).astype(np.int64)
    keys = pack_keys(idx)
    uniq, point_voxel, counts = np.unique(keys, return_inverse=True,
                                          return_counts=True)
    order = np.argsort(point_voxel, kind="stable")
    starts = np.zeros(uniq.shape[0] + 1, dtype=np.int64)
    np.cumsum(counts, out=starts[1:])

    summed = ad.scatter_rows(embeddings, point_voxel, uniq.shape[0])
    inv = (1.0 / counts).astype(summed.data.dtype)
    mean = ad.mul(summed, ad.Value(
        np.repeat(inv[:, None], summed.data.shape[1], axis=1)))

    return VoxelGrid(voxel_size=float(voxel_size), keys=uniq,
                     indices=unpack_keys(uniq), features=mean, stage=0,
                     point_voxel=point_voxel, member_order=order,
                     member_starts=starts)


def relative_positions(grid, cloud):
    """p_i minus its voxel center; every component within half a voxel."""
    if grid.point_voxel is None or grid.point_voxel.shape[0] != cloud.n:
        raise ValueError("grid was not built from this cloud")
    return cloud.positions - grid.centers()[grid.point_voxel]


def voxel_rows(grid, positions):
    """Row of the voxel containing each position; all must be occupied."""
    idx = np.floor(np.asarray(positions, dtype=np.float64)
                   / grid.voxel_size).astype(np.int64)
    keys = pack_keys(idx)
    rows = np.minimum(np.searchsorted(grid.keys, keys), grid.m - 1)
    miss = grid.keys[rows] != keys
    if miss.any():
        raise ValueError(
            f"{int(miss.sum())} positions fall outside the occupied grid")
    return rows.astype(np.int64)


def sparse_conv3(grid, kernel, bias):
    """Submanifold 3x3x3 convolution: active set unchanged, neighbors that
    exist contribute kernel[offset] @ feature; plus bias."""
    if kernel.data.ndim != 3 or kernel.data.shape[0] != 27 \
            or kernel.data.shape[1] != grid.width:
        raise ad.DimensionError(
            f"kernel {kernel.data.shape} does not fit 27x{grid.width}xD_out")
    d_out = kernel.data.shape[2]
    if bias.data.shape != (d_out,):
        raise ad.DimensionError(
            f"bias {bias.data.shape} does not match D_out {d_out}")

    acc = None
    for o in range(27):
        src, dst = grid.conv_pairs(o)
        if src.shape[0] == 0:
            continue
        contrib = ad.matmul(ad.gather_rows(grid.features, src),
                            ad.slice_first(kernel, o))
        term = ad.scatter_rows(contrib, dst, grid.m)
        acc = term if acc is None else ad.add(acc, term)
    out = ad.add(acc, bias)
    return grid.with_features(out)


def downsample(grid):
    """Stride-2 max pooling: parent index = floor(child/2), feature = child max.

    The returned grid records child_map so a decoder can copy parent rows
    back onto the children.
    """
    parent_idx = np.floor_divide(grid.indices, 2)
    pkeys = pack_keys(parent_idx)
    uniq, child_map, counts = np.unique(pkeys, return_inverse=True,
                                        return_counts=True)
    order = np.argsort(child_map, kind="stable").astype(np.int64)
    starts = np.zeros(uniq.shape[0] + 1, dtype=np.int64)
    np.cumsum(counts, out=starts[1:])
    pooled = ad.group_maxpool(grid.features, (order, starts))
    return VoxelGrid(voxel_size=grid.voxel_size * 2, keys=uniq,
                     indices=unpack_keys(uniq), features=pooled,
                     stage=grid.stage + 1, child_map=child_map)


def upsample_to(parent, child):
    """Copy each parent feature onto its children (inverse of downsample)."""
    if parent.child_map is None or parent.child_map.shape[0] != child.m:
        raise ValueError("parent grid does not map onto this child grid")
    return child.with_features(ad.gather_rows(parent.features, parent.child_map))


def devoxelize(grid, cloud):
    """Per-point feature = containing voxel's feature (stage-0 grids only)."""
    if grid.point_voxel is None or grid.point_voxel.shape[0] != cloud.n:
        raise ValueError("grid was not built from this cloud")
    return ad.gather_rows(grid.features, grid.point_voxel)
