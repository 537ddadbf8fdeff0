"""Numba switch for the hot kernels.

Set ``LIDARVPR_DISABLE_NUMBA=1`` to run every kernel through its pure-numpy
fallback. The flag is read once at import time.
"""

import os

DISABLE_ENV = "LIDARVPR_DISABLE_NUMBA"

try:
    import numba as _numba
except ImportError:  # pragma: no cover
    _numba = None

USE_NUMBA = _numba is not None and os.environ.get(DISABLE_ENV, "0") not in ("1", "true", "yes")

NUMBA_OPTS = {"cache": True, "nogil": True}


def njit(func):
    """Compile ``func`` with numba when enabled, else return it unchanged."""
    if not USE_NUMBA:
        return func
    return _numba.njit(func, **NUMBA_OPTS)


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
