"""Pinball (check) loss and sorted-order quantile helpers."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ConfigError

__all__ = [
    "PinballLoss",
    "pinball",
    "pinball_array",
    "empirical_pinball",
    "empirical_quantile",
    "quantile_rank",
    "check_level",
]


def check_level(alpha) -> float:
    alpha = float(alpha)
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"quantile level must lie in (0, 1), got {alpha!r}")
    return alpha


def quantile_rank(alpha: float, n: int, *, inflate: bool = False) -> int:
    """1-based sorted-order rank used for an empirical quantile.

    With ``inflate=False`` this is ``ceil(alpha * n)``, the rank of
    ``inf{a : F_n(a) >= alpha}``.  With ``inflate=True`` it is the
    split-conformal rank ``ceil(alpha * (n + 1))``.  ``alpha`` is read as
    the shortest decimal that round-trips the float and the product is
    formed in exact rational arithmetic, so ``alpha=0.7, n=10`` gives 7 and
    ``alpha=0.05, n+1=20`` gives 1 (float products or the binary expansion
    of 0.05 would give 8 and 2).  The result is *not* clamped.
    """
    m = n + 1 if inflate else n
    return math.ceil(Fraction(repr(float(alpha))) * m)


def empirical_quantile(values, alpha: float) -> float:
    """``inf{a : F_n(a) >= alpha}`` of a sample, i.e. a pinball minimiser."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("empirical_quantile of an empty sample")
    k = max(quantile_rank(alpha, v.size), 1)
    return float(np.partition(v, k - 1)[k - 1])


def pinball(a: float, y: float, alpha: float) -> float:
    """Normalised newsvendor loss ``(1-alpha)(a-y)^+ + alpha (y-a)^+``."""
    alpha = check_level(alpha)
    a = float(a)
    y = float(y)
    if not (math.isfinite(a) and math.isfinite(y)):
        raise ValueError("non-finite input")
    if a >= y:
        return (1.0 - alpha) * (a - y)
    return alpha * (y - a)


def pinball_array(predictions, targets, alpha: float) -> np.ndarray:
    """Element-wise pinball loss."""
    alpha = check_level(alpha)
    p = np.asarray(predictions, dtype=float)
    y = np.asarray(targets, dtype=float)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {y.shape}")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite input")
    diff = p - y
    return np.where(diff >= 0.0, (1.0 - alpha) * diff, -alpha * diff)


def empirical_pinball(predictions, targets, alpha: float) -> float:
    """Mean pinball loss of a prediction vector against realised demand."""
    losses = pinball_array(predictions, targets, alpha)
    if losses.size == 0:
        raise ValueError("empirical_pinball needs at least one pair")
    return float(losses.mean())


@dataclass(frozen=True)
class PinballLoss:
    """Pinball loss bound to a quantile level.

    Build from newsvendor costs with :meth:`from_costs`; the level is then
    ``c_u / (c_o + c_u)``.
    """

    alpha: float

    def __post_init__(self):
        check_level(self.alpha)

    @classmethod
    def from_costs(cls, costs) -> "PinballLoss":
        return cls(costs.alpha)

    def __call__(self, a, y):
        if np.ndim(a) == 0 and np.ndim(y) == 0:
            return pinball(a, y, self.alpha)
        return pinball_array(a, y, self.alpha)

    def mean(self, predictions, targets) -> float:
        return empirical_pinball(predictions, targets, self.alpha)
