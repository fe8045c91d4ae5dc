"""Import-time selection of the greedy-selection kernel.

The compiled extension (_greedy_core) is preferred; the NumPy fallback
(_greedy_pure) is used when the extension was not built or when the
SPECPRUNE_PURE environment variable is set. Both expose the same two
functions; benchmarks/bench_greedy.py compares them directly.
"""

import os

_impl = None
_BACKEND = "numpy"

if not os.environ.get("SPECPRUNE_PURE"):
    try:
        from . import _greedy_core as _impl
        _BACKEND = "cython"
    except ImportError:
        _impl = None

if _impl is None:
    from . import _greedy_pure as _impl

residual_init = _impl.residual_init
residual_update = _impl.residual_update


def greedy_backend_name():
    """Name of the kernel backend in use: 'cython' or 'numpy'."""
    return _BACKEND
