"""Numba dispatch.

Set ``GLEASON_NO_NUMBA=1`` to force the pure-numpy kernels. Both paths
compute the same arithmetic in the same order per output element.
"""
import os

_DISABLED = os.environ.get("GLEASON_NO_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:
    _njit = None
    HAVE_NUMBA = False


def njit(func):
    """``numba.njit(cache=True)`` when available, else None.

    Callers keep a numpy implementation and pick it when this returns None.
    """
    if not HAVE_NUMBA:
        return None
    return _njit(cache=True, nogil=True)(func)
