"""Numba switch for the hot kernels.

Set ``PRECSWITCH_DISABLE_JIT=1`` to run every kernel as plain Python/numpy.
"""

import os

DISABLE_ENV = "PRECSWITCH_DISABLE_JIT"

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

JIT_ENABLED = numba is not None and os.environ.get(DISABLE_ENV, "").lower() not in (
    "1",
    "true",
    "yes",
)


def maybe_njit(func):
    if JIT_ENABLED:
        return numba.njit(cache=True)(func)
    return func
