"""Numba switch.

Hot kernels are written twice: a numba ``@njit`` version and a pure numpy
version. ``LDR_NUMBA=0`` in the environment forces the numpy path; the numba
path is also skipped silently when numba is not importable.
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

_FALSY = {"0", "false", "no", "off"}

HAS_NUMBA = numba is not None
USE_NUMBA = HAS_NUMBA and os.environ.get("LDR_NUMBA", "1").strip().lower() not in _FALSY


def njit(func=None, **kwargs):
    """``numba.njit(cache=True)`` when numba is available, identity otherwise."""
    kwargs.setdefault("cache", True)
    if not HAS_NUMBA:
        return func if func is not None else (lambda f: f)
    if func is None:
        return numba.njit(**kwargs)
    return numba.njit(**kwargs)(func)


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
