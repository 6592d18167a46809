"""Kernel backend selection.

POLYIETI_BACKEND chooses the stiffness contraction kernel: "numba",
"numpy", or "auto" (default: numba when importable, else numpy).
POLYIETI_THREADS caps the numba thread pool.
"""

from __future__ import annotations

import os

from .errors import ConfigError

_choice = os.environ.get("POLYIETI_BACKEND", "auto").strip().lower()
if _choice not in ("auto", "numba", "numpy"):
    raise ConfigError(
        f"POLYIETI_BACKEND={_choice!r} not recognized (use auto, numba, or numpy)"
    )

_BACKEND = "numpy"
if _choice in ("auto", "numba"):
    try:
        import numba

        threads = os.environ.get("POLYIETI_THREADS")
        if threads:
            numba.set_num_threads(max(1, int(threads)))
        from . import _kernels_numba

        stiffness_cell_data = _kernels_numba.stiffness_cell_data
        _BACKEND = "numba"
    except ImportError:
        if _choice == "numba":
            raise ConfigError("POLYIETI_BACKEND=numba but numba is not importable")

if _BACKEND == "numpy":
    from . import _kernels_numpy

    stiffness_cell_data = _kernels_numpy.stiffness_cell_data


def backend_name() -> str:
    return _BACKEND
