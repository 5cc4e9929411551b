"""Backend selection for the hot loops.

The compiled ``_core`` extension is used when it imports; otherwise the numpy
fallback in ``_pycore`` is used. Setting ``MFCLIN_BACKEND=python`` forces the
fallback (handy for benchmarking and for cross-checking the two).
"""
import os

import numpy as np

from . import _pycore

BACKENDS = {"python": _pycore}
try:
    from . import _core
except ImportError:  # extension not built
    _core = None
else:
    BACKENDS["compiled"] = _core

if os.environ.get("MFCLIN_BACKEND", "").lower() == "python" or _core is None:
    BACKEND = "python"
else:
    BACKEND = "compiled"


def get_backend(name=None):
    """Return the module implementing the kernels (default: the active one)."""
    return BACKENDS[name or BACKEND]


def _f8(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _i8(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def nearest_rep(points, reps, backend=None):
    """Index of the tv-nearest representative (lowest index on ties) and its distance."""
    return get_backend(backend).nearest_rep(_f8(np.atleast_2d(points)), _f8(reps))


def sample_inverse_cdf(cdf, rows, u, backend=None):
    """Categorical draws: first k with ``u < cdf[row, k]``."""
    return get_backend(backend).sample_inverse_cdf(_f8(cdf), _i8(rows), _f8(u))


def bellman_sweep(stage, nxt, V, beta, backend=None):
    return get_backend(backend).bellman_sweep(_f8(stage), _i8(nxt), _f8(V), float(beta))


def linear_sa(theta, q, visits, xu, phi, cost, nxt, backend=None):
    """Visit-count stochastic approximation over a stream. Updates theta, q, visits in place."""
    for arr, dt in ((theta, np.float64), (q, np.float64), (visits, np.int64)):
        if arr.dtype != dt or not arr.flags.c_contiguous:
            raise TypeError("learner state arrays must be C-contiguous with the right dtype")
    get_backend(backend).linear_sa(theta, q, visits, _i8(xu), _f8(phi), _f8(cost), _i8(nxt))


def sgd_quadratic(K, H, v0, backend=None):
    """Returns (trajectory, running objective, index of first non-finite iterate or -1)."""
    return get_backend(backend).sgd_quadratic(_f8(K), _f8(H), _f8(v0))

