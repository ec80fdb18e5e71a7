"""Optional numba acceleration.

Hot kernels are written in the numpy subset numba understands.  Setting
``SAMIMO_NUMBA=0`` in the environment runs the very same functions as plain
numpy/Python, which is the reference path for testing and for platforms where
numba is unavailable.
"""

import os

_FLAG = os.environ.get("SAMIMO_NUMBA", "1").strip().lower()

try:
    import numba
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    numba = None

USE_NUMBA = numba is not None and _FLAG not in ("0", "false", "no", "off")


def njit(fn):
    """Compile ``fn`` with numba when enabled, else return it untouched.

    Either way the returned callable exposes ``py_func`` (the uncompiled
    function), so tests and benchmarks can run both paths side by side.
    """
    if USE_NUMBA:
        return numba.njit(cache=True, nogil=True)(fn)
    fn.py_func = fn
    return fn
