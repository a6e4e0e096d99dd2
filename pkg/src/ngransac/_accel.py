"""Selects compiled (numba) or pure-numpy kernels.

Set ``NGRANSAC_DISABLE_NUMBA=1`` before import to force the numpy path.
"""

import os

_FLAG = os.environ.get("NGRANSAC_DISABLE_NUMBA", "").strip().lower()

try:
    import numba
except ImportError:  # pragma: no cover - numba is optional
    numba = None

USE_NUMBA = numba is not None and _FLAG not in ("1", "true", "yes", "on")


def njit(fn):
    """``numba.njit(cache=True)`` when numba is active, identity otherwise."""
    if numba is None:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)
