"""
Handle optional imports for the JIT compiler used by the inner kernels
"""

import logging

logger = logging.getLogger(__name__)

# Try to import numba with a pure-Python fallback
try:
    import numba
    from numba import njit, prange
    HAS_NUMBA = True
except ImportError:
    logger.warning("Numba not available - kernels fall back to vectorized NumPy tiles")
    HAS_NUMBA = False
    numba = None
    prange = range

    def njit(*args, **kwargs):
        """No-op stand-in for numba.njit, usable with or without arguments"""
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def decorate(func):
            return func
        return decorate


def get_feature_availability():
    """Return dictionary of available optional features"""
    return {
        'numba': HAS_NUMBA,
        'parallel_kernels': HAS_NUMBA,
    }


def set_num_threads(threads: int) -> int:
    """Apply a kernel thread count, clamped to what the runtime offers; returns the effective count"""
    if not HAS_NUMBA:
        return 1
    effective = max(1, min(int(threads), numba.config.NUMBA_NUM_THREADS))
    if effective != threads:
        logger.warning(f"Requested {threads} threads, using {effective}")
    numba.set_num_threads(effective)
    return effective
