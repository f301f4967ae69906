"""Numba switch for the hot kernels.

Set ``HEALSWIN_NUMBA=0`` to force the pure-numpy code paths. The flag is read
once at import time.
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None
else:
    # the bundled TBB is too old; avoid the fallback warning
    numba.config.THREADING_LAYER = "workqueue"

NUMBA_ENABLED = numba is not None and os.environ.get("HEALSWIN_NUMBA", "1") not in ("0", "false", "no")


def njit(fn=None, *, parallel=False):
    """Compile ``fn`` with numba when enabled, otherwise return it untouched."""
    if fn is None:
        return lambda f: njit(f, parallel=parallel)
    if not NUMBA_ENABLED:
        return fn
    return numba.njit(cache=True, nogil=True, parallel=parallel)(fn)


prange = numba.prange if NUMBA_ENABLED else range


def set_threads(n):
    """Cap worker threads for numba and BLAS."""
    if n is None or n <= 0:
        return
    if numba is not None:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return
    threadpool_limits(n)
