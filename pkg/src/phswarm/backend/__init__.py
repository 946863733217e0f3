"""Kernel backend selection.

The numerical core of the tape engine ships twice: a Cython extension
(``cy_kernels``) and a pure-Python NumPy fallback (``py_kernels``) with
identical contracts. The compiled backend is preferred when present; set
``PHSWARM_BACKEND=python`` or ``=cython`` to force one (forcing cython raises
if the extension was never built). ``active`` is resolved once at import.
"""

import os

from . import py_kernels

_forced = os.environ.get("PHSWARM_BACKEND", "").strip().lower()

if _forced in ("python", "py"):
    active = py_kernels
elif _forced in ("cython", "cy", "c"):
    from . import cy_kernels

    active = cy_kernels
elif _forced:
    raise ValueError(f"unknown PHSWARM_BACKEND {_forced!r} (use 'python' or 'cython')")
else:
    try:
        from . import cy_kernels

        active = cy_kernels
    except ImportError:
        active = py_kernels

name = active.name
