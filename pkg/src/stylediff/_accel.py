"""Optional numba acceleration.

Set ``STYLEDIFF_DISABLE_NUMBA=1`` to force the pure-numpy kernels. The flag is
read once at import time.
"""

import os

_DISABLED = os.environ.get("STYLEDIFF_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _njit = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not _DISABLED


def njit(fn):
    """Compile ``fn`` with numba when available; otherwise return it unchanged.

    The uncompiled function is kept on ``.py_func`` in both cases so tests can
    exercise the Python source directly.
    """
    if not HAVE_NUMBA:
        fn.py_func = fn
        return fn
    return _njit(cache=True, nogil=True)(fn)
