"""Kernel backend selection.

MFCLAB_BACKEND=numpy forces the pure-numpy fallback; MFCLAB_BACKEND=numba
requires numba.  Unset: numba when importable, numpy otherwise.
`benchmarks/bench_kernels.py` compares the two.
"""

import os

from . import _kernels_np

_requested = os.environ.get("MFCLAB_BACKEND", "").strip().lower()

if _requested == "numpy":
    kernels = _kernels_np
    BACKEND = "numpy"
elif _requested == "numba":
    from . import _kernels_numba

    kernels = _kernels_numba
    BACKEND = "numba"
elif _requested == "":
    try:
        from . import _kernels_numba

        kernels = _kernels_numba
        BACKEND = "numba"
    except ImportError:
        kernels = _kernels_np
        BACKEND = "numpy"
else:
    raise RuntimeError(f"MFCLAB_BACKEND must be 'numpy' or 'numba', got {_requested!r}")


def backend_name():
    return BACKEND
