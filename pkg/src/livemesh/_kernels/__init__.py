"""Kernel backend selection.

Imports the compiled Cython extension when it is available, otherwise
falls back to the pure-Python reference implementation. Set
LIVEMESH_PURE=1 to force the fallback (used by the benchmark and the
backend-equivalence tests).
"""

import os

if os.environ.get("LIVEMESH_PURE"):
    from . import _pure as _impl
else:
    try:
        from . import _fast as _impl  # type: ignore[no-redef]
    except ImportError:
        from . import _pure as _impl  # type: ignore[no-redef]

BACKEND = _impl.BACKEND
curve_point = _impl.curve_point
curve_index = _impl.curve_index
assign_sources = _impl.assign_sources
