"""Numba switch for the hot kernels.

Set ``ROLLCAST_NUMBA=0`` to force the pure-numpy paths.  The flag is read once
at import time; both implementations stay importable so they can be compared.
"""
import os
import warnings

_requested = os.environ.get("ROLLCAST_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    if _requested:
        warnings.warn("numba unavailable; using numpy kernels", RuntimeWarning)

HAVE_NUMBA = numba is not None
USE_NUMBA = _requested and HAVE_NUMBA


def njit(fn):
    """Compile ``fn`` with numba when it is installed, else return it unchanged."""
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
