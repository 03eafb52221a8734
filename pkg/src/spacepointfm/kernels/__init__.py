"""Hot-loop kernels with a compiled core and a pure numpy fallback.

The Cython extension is preferred; set FMNPP_PURE_PYTHON=1 (or fail to build
the extension) to run on the fallback. Both backends are exercised by the
test suite and compared by benchmarks/bench_kernels.py.
"""

import os

import numpy as np

from . import _fallback

_FORCE_PURE = os.environ.get("FMNPP_PURE_PYTHON", "0") not in ("", "0")

if not _FORCE_PURE:
    try:
        from . import _compiled as _impl

        HAVE_COMPILED = True
    except ImportError:
        _impl = _fallback
        HAVE_COMPILED = False
else:
    _impl = _fallback
    HAVE_COMPILED = False

BACKEND = "compiled" if HAVE_COMPILED else "fallback"


def _as2d(x, like=None):
    arr = np.ascontiguousarray(x)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-d array, got shape {arr.shape}")
    if like is not None and arr.shape != like.shape:
        raise ValueError(f"shape mismatch: {arr.shape} vs {like.shape}")
    return arr


def scan_forward(a, b):
    a = _as2d(a)
    b = _as2d(b, like=a)
    return _impl.scan_forward(a, b)


def scan_backward(a, h, g):
    a = _as2d(a)
    h = _as2d(h, like=a)
    g = _as2d(g, like=a)
    return _impl.scan_backward(a, h, g)


def lap_solve(cost):
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"expected a square cost matrix, got shape {cost.shape}")
    return _impl.lap_solve(cost)


def get_backend(name):
    """Fetch a backend module by name ('compiled' or 'fallback') for benchmarks."""
    if name == "fallback":
        return _fallback
    if name == "compiled":
        if not HAVE_COMPILED:
            raise RuntimeError("compiled kernels are not available")
        from . import _compiled

        return _compiled
    raise ValueError(f"unknown backend {name!r}")
