"""Numba/numpy backend selection for the hot kernels.

Set HETEO_DISABLE_NUMBA=1 to force the pure-numpy fallback kernels; the
flag is read once at import. HETEO_THREADS caps intra-library parallelism
(0 or 1 means serial).
"""

import os

_disable = os.environ.get("HETEO_DISABLE_NUMBA", "0").lower() in ("1", "true", "yes")

if not _disable:
    try:
        from numba import njit

        NUMBA_ENABLED = True
    except ImportError:
        NUMBA_ENABLED = False
else:
    NUMBA_ENABLED = False

if not NUMBA_ENABLED:

    def njit(*args, **kwargs):  # noqa: F811 - decorator shim, keeps signatures importable
        def wrap(func):
            return func

        if args and callable(args[0]):
            return args[0]
        return wrap


def backend_name():
    return "numba" if NUMBA_ENABLED else "numpy"


def thread_count():
    """Worker count for parallel sections, from HETEO_THREADS (default 1)."""
    raw = os.environ.get("HETEO_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        return 1
    return max(1, n)
