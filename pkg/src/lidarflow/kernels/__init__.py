"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

The backend is chosen at import time from the ``LIDARFLOW_BACKEND``
environment variable: ``numba`` (default when numba imports cleanly) or
``numpy``. ``lidarflow.bench`` times both backends side by side.
"""

import os

from . import numpy_backend

_requested = os.environ.get("LIDARFLOW_BACKEND", "").strip().lower()

if _requested not in ("", "numba", "numpy"):
    raise ValueError(
        f"LIDARFLOW_BACKEND must be 'numba' or 'numpy', got {_requested!r}"
    )

if _requested == "numpy":
    _impl = numpy_backend
    BACKEND = "numpy"
else:
    try:
        from . import numba_backend as _impl
        BACKEND = "numba"
    except ImportError:
        if _requested == "numba":
            raise
        _impl = numpy_backend
        BACKEND = "numpy"

neighborhood_eigenvalues = _impl.neighborhood_eigenvalues
octant_mean_pool = _impl.octant_mean_pool
best_two_neighbors = _impl.best_two_neighbors

__all__ = [
    "BACKEND",
    "neighborhood_eigenvalues",
    "octant_mean_pool",
    "best_two_neighbors",
]
