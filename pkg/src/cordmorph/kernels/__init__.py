"""Hot kernels with a compiled (Cython) core and a pure-Python fallback.

The compiled module is used when it was built and ``CORDMORPH_PURE`` is not
set in the environment. ``BACKEND`` names the active implementation; both
implementations stay importable as ``python_backend`` / ``compiled_backend``
so they can be compared directly.
"""

import os

from . import _pykernels as python_backend

try:
    from . import _ckernels as compiled_backend
except ImportError:  # extension not built
    compiled_backend = None

if compiled_backend is not None and not os.environ.get("CORDMORPH_PURE"):
    _impl = compiled_backend
    BACKEND = "cython"
else:
    _impl = python_backend
    BACKEND = "python"

nearest_distances = _impl.nearest_distances
hull_lattice_count = _impl.hull_lattice_count
dilate6 = _impl.dilate6
erode6 = _impl.erode6

__all__ = [
    "BACKEND",
    "compiled_backend",
    "python_backend",
    "nearest_distances",
    "hull_lattice_count",
    "dilate6",
    "erode6",
]
