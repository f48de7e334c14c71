"""Backend selection for the hot numerical kernels.

The propagation engine compiles with numba when it is importable and the
``VESSELTRACE_BACKEND`` environment variable does not force the interpreted
path. Set ``VESSELTRACE_BACKEND=python`` (or ``numpy``) to run the exact same
code as plain Python loops over numpy arrays; results are identical either
way, only speed differs.
"""

import os

_FORCED = os.environ.get("VESSELTRACE_BACKEND", "").strip().lower()

if _FORCED in ("python", "numpy"):
    njit = None
    _NUMBA_AVAILABLE = False
elif _FORCED in ("", "numba", "auto"):
    try:
        from numba import njit

        _NUMBA_AVAILABLE = True
    except ImportError:
        njit = None
        _NUMBA_AVAILABLE = False
else:
    raise RuntimeError(
        "VESSELTRACE_BACKEND must be one of: numba, python, numpy, auto "
        "(got %r)" % _FORCED
    )

__all__ = ["backend_name", "jit"]


def backend_name() -> str:
    """Name of the active backend: 'numba' or 'python'."""
    return "numba" if _NUMBA_AVAILABLE else "python"


def jit(func=None, **kwargs):
    """numba.njit when the compiled backend is active, identity otherwise."""
    if func is None:
        def wrap(f):
            return jit(f, **kwargs)
        return wrap
    if _NUMBA_AVAILABLE:
        return njit(cache=True, **kwargs)(func)
    return func
