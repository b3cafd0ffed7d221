"""Numba switch.

Set ``GDDIM_DISABLE_NUMBA=1`` to force the pure-numpy kernels. The flag is
read once, at import time.
"""
import os
import warnings

_flag = os.environ.get("GDDIM_DISABLE_NUMBA", "").strip().lower()
DISABLED = _flag not in ("", "0", "false", "no")

try:
    if DISABLED:
        raise ImportError("disabled by GDDIM_DISABLE_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError as e:
    HAVE_NUMBA = False
    if not DISABLED:
        warnings.warn(f"numba unavailable ({e}); using numpy kernels, which are much slower")

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def decorator(func):
            return func

        return decorator
