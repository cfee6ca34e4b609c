"""Kernel compilation switch.

Hot simulator kernels are written as plain Python over numpy arrays and
compiled with ``numba.njit`` when available. Set ``COREALLOC_DISABLE_JIT=1``
to run them uncompiled; results are identical, only slower.
"""
import os

_FLAG = os.environ.get("COREALLOC_DISABLE_JIT", "0").strip().lower()

JIT_ENABLED = _FLAG not in ("1", "true", "yes", "on")

if JIT_ENABLED:
    try:
        import numba
    except ImportError:  # pragma: no cover - numba is a declared dependency
        JIT_ENABLED = False


def njit(func):
    """Compile ``func`` in nopython mode, or return it untouched.

    The uncompiled function stays reachable as ``.py_func`` either way so
    benchmarks can time both paths in one process.
    """
    if JIT_ENABLED:
        return numba.njit(cache=True)(func)
    func.py_func = func
    return func
