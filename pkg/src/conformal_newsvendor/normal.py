"""Standard normal CDF, density and quantile function.

Thin wrappers over :mod:`scipy.special` that return Python floats for
scalar input and reject quantile levels outside [0, 1] instead of
returning NaN.
"""

from __future__ import annotations

import numpy as np
from scipy import special

__all__ = ["ndtr", "ndtri", "npdf"]

_SQRT2PI = np.sqrt(2.0 * np.pi)


def _out(v):
    return v if v.ndim else float(v)


def ndtr(x):
    """Standard normal CDF."""
    return _out(special.ndtr(np.asarray(x, dtype=float)))


def npdf(x):
    x = np.asarray(x, dtype=float)
    return _out(np.exp(-0.5 * x * x) / _SQRT2PI)


def ndtri(p):
    """Inverse of :func:`ndtr`; ``ndtri(0) = -inf`` and ``ndtri(1) = inf``."""
    p = np.asarray(p, dtype=float)
    if np.any(np.isnan(p)) or np.any((p < 0.0) | (p > 1.0)):
        raise ValueError("ndtri argument must lie in [0, 1]")
    return _out(special.ndtri(p))
