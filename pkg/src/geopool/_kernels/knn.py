"""Exact k-nearest-neighbor queries via expanding ring search on a uniform grid.

One implementation, two compilations: numba-jitted (default) and interpreted
(fallback / benchmarking baseline). Results are identical to a brute-force
scan, including the tie rule: rows ordered by (distance^2, point index).
"""

import numpy as np

from . import NUMBA_ENABLED

if NUMBA_ENABLED:
    from numba import njit, prange
else:
    prange = range


def build_cell_index(points, cell_size):
    """Bucket points into cubic cells.

    Returns (min_cell, dims, cell_ids, cell_starts, order): occupied cells as
    sorted linear ids with CSR starts into `order`, a permutation of point rows.
    """
    cells = np.floor(points / cell_size).astype(np.int64)
    min_cell = cells.min(axis=0)
    rel = cells - min_cell
    dims = rel.max(axis=0) + 1
    lid = (rel[:, 0] * dims[1] + rel[:, 1]) * dims[2] + rel[:, 2]
    order = np.argsort(lid, kind="stable")
    sorted_lid = lid[order]
    cell_ids, counts = np.unique(sorted_lid, return_counts=True)
    cell_starts = np.zeros(cell_ids.shape[0] + 1, dtype=np.int64)
    np.cumsum(counts, out=cell_starts[1:])
    return min_cell, dims, cell_ids, cell_starts, order


def _ring_search_impl(points, cell_size, min_cell, dims, cell_ids, cell_starts,
                      order, k, out):
    n = points.shape[0]
    for q in prange(n):
        qx = points[q, 0]
        qy = points[q, 1]
        qz = points[q, 2]
        cqx = int(np.floor(qx / cell_size)) - min_cell[0]
        cqy = int(np.floor(qy / cell_size)) - min_cell[1]
        cqz = int(np.floor(qz / cell_size)) - min_cell[2]

        best_d = np.full(k, np.inf)
        best_i = np.full(k, -1, dtype=np.int64)
        count = 0

        mx = max(cqx, dims[0] - 1 - cqx)
        my = max(cqy, dims[1] - 1 - cqy)
        mz = max(cqz, dims[2] - 1 - cqz)
        max_ring = max(mx, max(my, mz))

        ring = 0
        while ring <= max_ring:
            for dx in range(-ring, ring + 1):
                cx = cqx + dx
                if cx < 0 or cx >= dims[0]:
                    continue
                on_x_face = dx == -ring or dx == ring
                for dy in range(-ring, ring + 1):
                    cy = cqy + dy
                    if cy < 0 or cy >= dims[1]:
                        continue
                    on_y_face = dy == -ring or dy == ring
                    if on_x_face or on_y_face:
                        dz_lo, dz_hi, dz_step = -ring, ring, 1
                    else:
                        # interior in x and y: only the z = ±ring faces remain
                        dz_lo, dz_hi, dz_step = -ring, ring, max(2 * ring, 1)
                    for dz in range(dz_lo, dz_hi + 1, dz_step):
                        cz = cqz + dz
                        if cz < 0 or cz >= dims[2]:
                            continue
                        lid = (cx * dims[1] + cy) * dims[2] + cz
                        pos = np.searchsorted(cell_ids, lid)
                        if pos >= cell_ids.shape[0] or cell_ids[pos] != lid:
                            continue
                        for j in range(cell_starts[pos], cell_starts[pos + 1]):
                            p = order[j]
                            ddx = points[p, 0] - qx
                            ddy = points[p, 1] - qy
                            ddz = points[p, 2] - qz
                            d2 = ddx * ddx + ddy * ddy + ddz * ddz
                            if count < k:
                                ins = count
                                count += 1
                            else:
                                if d2 > best_d[k - 1] or (d2 == best_d[k - 1]
                                                          and p > best_i[k - 1]):
                                    continue
                                ins = k - 1
                            while ins > 0 and (best_d[ins - 1] > d2 or
                                               (best_d[ins - 1] == d2
                                                and best_i[ins - 1] > p)):
                                best_d[ins] = best_d[ins - 1]
                                best_i[ins] = best_i[ins - 1]
                                ins -= 1
                            best_d[ins] = d2
                            best_i[ins] = p
            if count == k:
                # cells beyond this ring are at least ring*cell_size away
                bound = ring * cell_size
                if best_d[k - 1] <= bound * bound:
                    break
            ring += 1
        for j in range(k):
            out[q, j] = best_i[j]


if NUMBA_ENABLED:
    _ring_search = njit(parallel=True, cache=True)(_ring_search_impl)
else:
    _ring_search = _ring_search_impl


def _run(search_fn, points, k, cell_size):
    points = np.ascontiguousarray(points, dtype=np.float64)
    min_cell, dims, cell_ids, cell_starts, order = build_cell_index(points, cell_size)
    out = np.empty((points.shape[0], k), dtype=np.int64)
    search_fn(points, float(cell_size), min_cell, dims, cell_ids, cell_starts,
              order, k, out)
    return out


def grid_knn(points, k, cell_size):
    return _run(_ring_search, points, k, cell_size)


def grid_knn_python(points, k, cell_size):
    """Interpreted reference path for the same ring search."""
    return _run(_ring_search_impl, points, k, cell_size)
