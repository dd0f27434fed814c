"""Optional numba acceleration.

Kernels are written once in plain Python/numpy style. When numba is importable
and ``DACAL_DISABLE_NUMBA`` is unset (or ``0``), they are compiled with
``@njit``; otherwise callers use the vectorised numpy fallbacks.
"""
from __future__ import annotations

import logging
import os

logger = logging.getLogger(__name__)


def _numba_requested() -> bool:
    flag = os.environ.get("DACAL_DISABLE_NUMBA", "0").strip().lower()
    return flag in ("", "0", "false", "no")


try:
    if not _numba_requested():
        raise ImportError("disabled by DACAL_DISABLE_NUMBA")
    import numba

    # the bundled TBB is too old on some hosts; avoid probing it
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]
    logging.getLogger("numba").setLevel(logging.WARNING)
    HAS_NUMBA = True
except ImportError:
    numba = None
    HAS_NUMBA = False


def njit(*args, **kwargs):
    """``numba.njit`` when available, identity decorator otherwise."""
    if HAS_NUMBA:
        return numba.njit(*args, **kwargs)
    if args and callable(args[0]):
        return args[0]
    return lambda f: f


def backend() -> str:
    return "numba" if HAS_NUMBA else "numpy"


def set_threads(n: int | None) -> None:
    """Cap the numba worker pool. No-op for the numpy backend."""
    if n is None or not HAS_NUMBA:
        return
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
