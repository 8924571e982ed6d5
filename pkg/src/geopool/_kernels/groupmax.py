"""Channelwise max over ragged index groups (CSR layout), with arg rows for backward.

Ties resolve to the lowest row index, so forward and backward are
deterministic for duplicated features regardless of group ordering.
"""

import numpy as np

from . import NUMBA_ENABLED


def group_max_csr_numpy(feats, flat, starts):
    gathered = feats[flat]
    vals = np.maximum.reduceat(gathered, starts[:-1], axis=0)
    # lowest row index per segment attaining the max, per channel
    seg_of = np.repeat(np.arange(starts.shape[0] - 1), np.diff(starts))
    hit = gathered == vals[seg_of]
    cand = np.where(hit, flat[:, None], feats.shape[0])
    arg_rows = np.minimum.reduceat(cand, starts[:-1], axis=0)
    return vals, arg_rows


if NUMBA_ENABLED:
    from numba import njit

    @njit(cache=True)
    def _group_max_loop(feats, flat, starts, vals, arg_rows):
        n_groups = starts.shape[0] - 1
        n_ch = feats.shape[1]
        for g in range(n_groups):
            lo = starts[g]
            hi = starts[g + 1]
            for c in range(n_ch):
                best = feats[flat[lo], c]
                best_row = flat[lo]
                for j in range(lo + 1, hi):
                    r = flat[j]
                    v = feats[r, c]
                    if v > best or (v == best and r < best_row):
                        best = v
                        best_row = r
                vals[g, c] = best
                arg_rows[g, c] = best_row

    def group_max_csr(feats, flat, starts):
        n_groups = starts.shape[0] - 1
        vals = np.empty((n_groups, feats.shape[1]), dtype=feats.dtype)
        arg_rows = np.empty((n_groups, feats.shape[1]), dtype=np.int64)
        _group_max_loop(feats, flat, starts, vals, arg_rows)
        return vals, arg_rows
else:
    group_max_csr = group_max_csr_numpy
