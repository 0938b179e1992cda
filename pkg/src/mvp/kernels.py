"""Kernel backend selection.

The Cython extension is used when it is importable; otherwise, or when the
environment variable ``MVP_PURE_PYTHON`` is set to a non-empty value other
than ``0``, the pure-Python versions are used. ``BACKEND`` names the choice.
"""

import os

from . import _pykernels as python_backend

compiled_backend = None
if os.environ.get("MVP_PURE_PYTHON", "0") in ("", "0"):
    try:
        from . import _kernels as compiled_backend
    except ImportError:  # extension not built
        compiled_backend = None

_impl = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "compiled" if compiled_backend is not None else "python"

splitmix64_state = _impl.splitmix64_state
xoshiro_fill_u64 = _impl.xoshiro_fill_u64
xoshiro_fill_uniform = _impl.xoshiro_fill_uniform
jacobi_eigh = _impl.jacobi_eigh
momentum_step = _impl.momentum_step
fnv1a64 = _impl.fnv1a64
