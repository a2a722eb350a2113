"""Numba switch for the hot kernels.

Setting ``TILC_DISABLE_NUMBA=1`` before import runs every kernel as plain
Python/numpy.  Jitted functions keep the original under ``.py_func``.
"""
import os

_TRUTHY = {"1", "true", "yes", "on"}

NUMBA_DISABLED = os.environ.get("TILC_DISABLE_NUMBA", "").strip().lower() in _TRUTHY

if not NUMBA_DISABLED:
    try:
        import numba
    except ImportError:  # pragma: no cover - numba is a declared dependency
        NUMBA_DISABLED = True

USING_NUMBA = not NUMBA_DISABLED


def njit(fn):
    if NUMBA_DISABLED:
        fn.py_func = fn
        return fn
    return numba.njit(cache=True, nogil=True)(fn)
