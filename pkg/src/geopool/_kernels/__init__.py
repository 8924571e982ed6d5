"""Hot inner loops, JIT-compiled with numba when available.

Set GEOPOOL_NO_NUMBA=1 before import to force the pure-numpy/interpreted
fallbacks (same semantics, slower). GEOPOOL_THREADS caps numba's thread
count for parallel kernels. `benchmarks/bench_kernels.py` times both paths.
"""

import os


def _truthy(name):
    return os.environ.get(name, "").strip().lower() in {"1", "true", "yes", "on"}


NUMBA_ENABLED = False
if not _truthy("GEOPOOL_NO_NUMBA"):
    try:
        # the bundled TBB is too old on some images; omp/workqueue are fine
        os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")
        import numba

        NUMBA_ENABLED = True
        threads = os.environ.get("GEOPOOL_THREADS", "").strip()
        if threads:
            numba.set_num_threads(max(1, min(int(threads), numba.config.NUMBA_NUM_THREADS)))
    except ImportError:
        NUMBA_ENABLED = False


def backend():
    """Which implementation path is live: 'numba' or 'numpy'."""
    return "numba" if NUMBA_ENABLED else "numpy"


from .scatter import scatter_add, scatter_add_numpy
from .groupmax import group_max_csr, group_max_csr_numpy
from .knn import grid_knn, grid_knn_python

__all__ = [
    "NUMBA_ENABLED", "backend",
    "scatter_add", "scatter_add_numpy",
    "group_max_csr", "group_max_csr_numpy",
    "grid_knn", "grid_knn_python",
]
