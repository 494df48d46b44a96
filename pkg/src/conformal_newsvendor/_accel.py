"""Kernel backend selection.

The compiled module is preferred; ``CNV_PURE_PYTHON=1`` in the environment
forces the numpy fallback (useful for parity tests and benchmarks).
"""

from __future__ import annotations

import os

from . import _pykernels

if os.environ.get("CNV_PURE_PYTHON", "") not in ("", "0"):
    kernels = _pykernels
else:
    try:
        from . import _kernels as kernels
    except ImportError:  # extension not built
        kernels = _pykernels

BACKEND = kernels.BACKEND


def python_kernels():
    return _pykernels


def compiled_kernels():
    """The compiled module, or None when it is not available."""
    try:
        from . import _kernels
    except ImportError:
        return None
    return _kernels
