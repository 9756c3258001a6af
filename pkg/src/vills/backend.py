"""Kernel backend selection.

The hot row-wise kernels exist twice: a pure-numpy version and a numba
``@njit`` version.  The environment variable ``VILLS_BACKEND`` picks the
active set once at import time:

    VILLS_BACKEND=numpy   force the numpy kernels
    VILLS_BACKEND=numba   force the numba kernels (import error if missing)
    unset / auto          numba when importable, numpy otherwise

``benchmarks/bench_kernels.py`` times both sets side by side.
"""

import os

from . import _kernels_numpy

_choice = os.environ.get("VILLS_BACKEND", "auto").lower()

if _choice not in ("auto", "numpy", "numba"):
    raise RuntimeError(f"VILLS_BACKEND must be auto|numpy|numba, got {_choice!r}")

if _choice == "numpy":
    _impl = _kernels_numpy
    BACKEND = "numpy"
else:
    try:
        from . import _kernels_numba as _impl

        BACKEND = "numba"
    except ImportError:
        if _choice == "numba":
            raise
        _impl = _kernels_numpy
        BACKEND = "numpy"

softmax_fwd = _impl.softmax_fwd
softmax_bwd = _impl.softmax_bwd
layer_norm_fwd = _impl.layer_norm_fwd
layer_norm_bwd = _impl.layer_norm_bwd
min_neighbor_distances = _impl.min_neighbor_distances
