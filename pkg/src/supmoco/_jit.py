"""Numba switch.

Kernels in :mod:`supmoco.kernels` exist in two flavours: a numba ``@njit``
version and a plain numpy version. The numba path is used when numba
imports and ``SUPMOCO_DISABLE_JIT`` is unset (or ``0``). Set
``SUPMOCO_DISABLE_JIT=1`` before import to force the numpy path.
"""

import os

_flag = os.environ.get("SUPMOCO_DISABLE_JIT", "0").strip().lower()
JIT_REQUESTED = _flag in ("", "0", "false", "no")

try:
    from numba import njit as _njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _njit = None
    HAS_NUMBA = False

USE_JIT = JIT_REQUESTED and HAS_NUMBA


def njit(fn):
    """Compile ``fn`` with numba if available, else return it unchanged.

    Compilation is requested whether or not the JIT path is active, so the
    compiled twin can still be benchmarked and tested against numpy.
    """
    if _njit is None:
        return fn
    return _njit(cache=True, nogil=True)(fn)
