"""Backend switch for the hot kernels.

Set ``CALIBRA_BACKEND=numpy`` to force the pure-numpy code paths; the default
is ``numba`` whenever numba imports cleanly.
"""
from __future__ import annotations

import functools
import os

try:
    import numba

    NUMBA_OK = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    NUMBA_OK = False

_requested = os.environ.get("CALIBRA_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ImportError(f"CALIBRA_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

BACKEND = "numba" if (_requested == "numba" and NUMBA_OK) else "numpy"


def njit(*args, **kwargs):
    """``numba.njit`` with cache/nogil defaults, or a passthrough without numba."""
    kwargs.setdefault("cache", True)
    kwargs.setdefault("nogil", True)
    if not NUMBA_OK:
        if args and callable(args[0]):
            return args[0]
        return lambda f: f
    return numba.njit(*args, **kwargs)


def pick(numba_impl, numpy_impl):
    """Return the implementation matching the active backend."""
    chosen = numba_impl if BACKEND == "numba" else numpy_impl

    @functools.wraps(numpy_impl)
    def dispatch(*args, **kwargs):
        return chosen(*args, **kwargs)

    dispatch.numba_impl = numba_impl
    dispatch.numpy_impl = numpy_impl
    return dispatch
