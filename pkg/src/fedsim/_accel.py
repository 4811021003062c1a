"""Numba switch.

Set ``FEDSIM_DISABLE_NUMBA=1`` before importing fedsim to force the pure
numpy kernels. Numba is also skipped silently when it is not installed.
"""

import os

_FLAG = os.environ.get("FEDSIM_DISABLE_NUMBA", "").strip().lower()

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

NUMBA_AVAILABLE = numba is not None
USE_NUMBA = NUMBA_AVAILABLE and _FLAG not in ("1", "true", "yes", "on")


def njit(func):
    """Compile ``func`` with numba when available, otherwise return it unchanged."""
    if NUMBA_AVAILABLE:
        return numba.njit(cache=True, nogil=True)(func)
    return func
