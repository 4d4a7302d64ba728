"""Hot kernels: pairwise squared distances and threshold masks.

The compiled Cython module is used when it was built; otherwise the numpy
fallback is selected. Setting ``HNPM_PURE_PYTHON=1`` forces the fallback.

Even with the compiled module loaded, the distance backward and the mask
stay on numpy: the backward is two BLAS matrix products and the mask a
single vectorised compare, both faster than the compiled loops (see
``benchmarks/bench_kernels.py``).
"""
import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("HNPM_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels


def _c(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def pairwise_sqdist(a, b):
    """Return the n x m matrix of squared Euclidean distances between rows."""
    return _impl.pairwise_sqdist(_c(a), _c(b))


def pairwise_sqdist_backward(g, a, b):
    return _pykernels.pairwise_sqdist_backward(_c(g), _c(a), _c(b))


def threshold_mask(dist, threshold, exclude_diagonal=True):
    return _pykernels.threshold_mask(_c(dist), float(threshold), bool(exclude_diagonal))


def backends():
    """Map backend name to implementation module for every available backend."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels

        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
