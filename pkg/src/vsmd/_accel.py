"""Numba dispatch switch.

Set ``VSMD_DISABLE_NUMBA=1`` to force the pure-numpy implementations of the
hot kernels in :mod:`vsmd.fastpath`.  The flag is read once at import.
"""
import os


def _noop_jit(*args, **kwargs):
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def wrap(f):
        return f

    return wrap


def _have_numba():
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


HAVE_NUMBA = _have_numba()
USE_NUMBA = HAVE_NUMBA and os.environ.get("VSMD_DISABLE_NUMBA", "0").lower() not in ("1", "true", "yes")

if HAVE_NUMBA:
    from numba import njit
else:  # pragma: no cover
    njit = _noop_jit


def backend():
    return "numba" if USE_NUMBA else "numpy"
