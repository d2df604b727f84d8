"""Numba toggle.

Set ``ROBUSTDET_DISABLE_NUMBA=1`` to run the pure-numpy kernels instead of the
``@njit`` versions (also used automatically when numba is not installed).
"""

import os

try:
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("ROBUSTDET_DISABLE_NUMBA", "").lower() not in ("1", "true", "yes")


def optional_njit(*args, **kwargs):
    """``numba.njit`` when numba is available, otherwise the identity decorator."""
    def decorator(func):
        if HAVE_NUMBA:
            return njit(*args, **kwargs)(func)
        return func
    return decorator
