"""Backend selection for the hot kernels.

The compiled module ``cpelab._ckernels`` is used when it imports cleanly;
otherwise (or when ``CPELAB_BACKEND=python``) the numpy versions in
``cpelab._pykernels`` are used. ``BACKEND`` names the active one.
"""

import os

import numpy as np

from . import _pykernels

_ckernels = None
if os.environ.get("CPELAB_BACKEND", "").lower() not in ("python", "py", "numpy"):
    try:
        from . import _ckernels
    except ImportError:  # extension not built
        _ckernels = None

BACKEND = "cython" if _ckernels is not None else "python"
_impl = _ckernels if _ckernels is not None else _pykernels


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def softmax_columns(m):
    return _impl.softmax_columns(_c(m))


def softmax_columns_backward(s, g):
    return _impl.softmax_columns_backward(_c(s), _c(g))


def logistic(x):
    return _impl.logistic(_c(x))


def power_iteration(w, x0, tol, max_iters):
    return _impl.power_iteration(_c(w), _c(x0), float(tol), int(max_iters))


def use_backend(name):
    """Switch the active kernels ("python" or "cython"); returns the previous name."""
    global BACKEND, _impl
    impls = implementations()
    if name not in impls:
        raise ValueError(f"backend {name!r} is not available; have {sorted(impls)}")
    previous = BACKEND
    BACKEND, _impl = name, impls[name]
    return previous


def implementations():
    """Both kernel sets keyed by name, for benchmarks and cross-checks."""
    out = {"python": _pykernels}
    if _ckernels is not None:
        out["cython"] = _ckernels
    return out
