"""Kernel backend selection.

Hot loops are written twice: a numba ``@njit`` kernel and a vectorized numpy
equivalent. Set ``MONOINDOOR_DISABLE_NUMBA=1`` (or run without numba
installed) to force the numpy path. Both paths compute the same quantities in
float64; results agree to rounding.
"""

from __future__ import annotations

import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

_DISABLED = os.environ.get("MONOINDOOR_DISABLE_NUMBA", "").lower() in ("1", "true", "yes")

HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and not _DISABLED


def njit(*args, **kwargs):
    """``numba.njit`` with ``cache=True`` by default; identity if numba is missing."""
    if numba is None:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f
    kwargs.setdefault("cache", True)
    return numba.njit(*args, **kwargs)


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
