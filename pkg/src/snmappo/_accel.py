"""Optional numba acceleration for the hot inner loops.

Kernels are written as plain loops over numpy arrays so the same source runs
either compiled (``numba.njit``) or interpreted. Set ``SNMAPPO_NUMBA=0`` before
import to force the pure-python/numpy path.
"""

from __future__ import annotations

import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

USE_NUMBA = numba is not None and os.environ.get("SNMAPPO_NUMBA", "1").lower() not in ("0", "false", "no", "off")


def njit(func):
    """Compile ``func`` with numba when enabled, otherwise return it unchanged."""
    if USE_NUMBA:
        return numba.njit(cache=True)(func)
    return func


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
