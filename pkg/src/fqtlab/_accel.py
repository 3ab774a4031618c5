"""Switch between numba-compiled kernels and their pure-numpy twins.

Set ``FQTLAB_DISABLE_NUMBA=1`` before importing :mod:`fqtlab` to force the
numpy path.  The numpy path is also used when numba cannot be imported.
"""

from __future__ import annotations

import os

_FLAG = "FQTLAB_DISABLE_NUMBA"


def _numba_requested() -> bool:
    return os.environ.get(_FLAG, "").strip().lower() not in {"1", "true", "yes", "on"}


try:
    if not _numba_requested():
        raise ImportError("disabled by " + _FLAG)
    import numba as _numba

    HAVE_NUMBA = True
except ImportError:
    _numba = None
    HAVE_NUMBA = False


def njit(func):
    """``numba.njit(cache=True)`` when available, else the function untouched."""
    if _numba is None:
        return func
    return _numba.njit(cache=True)(func)


def backend() -> str:
    return "numba" if HAVE_NUMBA else "numpy"
