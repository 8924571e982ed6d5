"""Row scatter-add: out[idx[j]] += src[j]. Backbone of sparse conv and gather grads."""

import numpy as np

from . import NUMBA_ENABLED


def scatter_add_numpy(out, src, idx):
    np.add.at(out, idx, src)


if NUMBA_ENABLED:
    from numba import njit

    @njit(cache=True)
    def _scatter_add_loop(out, src, idx):
        for j in range(idx.shape[0]):
            r = idx[j]
            for c in range(src.shape[1]):
                out[r, c] += src[j, c]

    def scatter_add(out, src, idx):
        _scatter_add_loop(out, src, idx)
else:
    scatter_add = scatter_add_numpy
