"""Backend selection for the compiled kernels.

Set ``SEMITRACK_DISABLE_NUMBA=1`` to force the pure-numpy code path. The flag
is read once at import time.
"""
import os

_flag = os.environ.get("SEMITRACK_DISABLE_NUMBA", "").strip().lower()
DISABLED = _flag in ("1", "true", "yes", "on")

try:
    if DISABLED:
        raise ImportError
    from numba import njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        # no-op decorator usable both bare and with arguments
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda fn: fn


BACKEND = "numba" if HAS_NUMBA else "numpy"
