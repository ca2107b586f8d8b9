"""Backend selection for the numeric kernels.

``OCGEOM_BACKEND=numpy`` (or a missing numba install) runs every kernel as
plain Python/numpy; anything else JIT-compiles them with numba.
"""

from __future__ import annotations

import os

ENV_FLAG = "OCGEOM_BACKEND"

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None
    _HAVE_NUMBA = False

USE_NUMBA = _HAVE_NUMBA and os.environ.get(ENV_FLAG, "numba").strip().lower() != "numpy"


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"


def jit(func):
    """``numba.njit`` when the numba backend is active, identity otherwise.

    The undecorated function stays reachable as ``func.py_func`` in both
    cases so benchmarks and tests can compare the two paths.
    """
    if USE_NUMBA:
        return numba.njit(cache=True, error_model="numpy")(func)
    func.py_func = func
    return func


def force_jit(func):
    """Compile with numba whenever it is installed, ignoring the env flag."""
    if _HAVE_NUMBA:
        return numba.njit(cache=True, error_model="numpy")(func)
    func.py_func = func
    return func
