"""Synthetic demand generators with standard normal noise.

Families
--------
``ml``
    Ten uniform covariates on [0, 1] and a sum of exponential, quadratic and
    absolute-value terms.
``ma``
    Ten uniform covariates and a logistic response in ``theta @ x``.
``example2``
    ``|x @ theta| + theta0``: a constant offset that an intercept-free model
    cannot represent.
``example3``
    One covariate on [-4, 4] with slope 4 on the left branch and 2 on the
    right, both meeting at height 2.
``linear``
    ``theta @ x``, whose conditional quantiles are known in closed form.

Every family draws ``Y = f(X) + eps`` with ``eps ~ N(0, 1)``, so the true
alpha-quantile is ``f(x) + ndtri(alpha)``.

Rows are produced in fixed blocks of :data:`BLOCK` rows, each from its own
counter-based stream, so a block can be generated on any worker and the
output never depends on how the work was divided.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import Dataset, RngStream, write_csv
from .errors import ConfigError
from .loss import check_level
from .normal import ndtri

__all__ = [
    "GeneratorSpec",
    "FAMILIES",
    "MA_THETA",
    "f_ml",
    "f_ma",
    "noiseless",
    "true_quantile",
    "generate",
    "export_csv",
]

BLOCK = 4096
MA_THETA = (2.0, -4.0, 2.0, -1.0, 3.0, 5.0, -2.0, -1.0, 0.5, 2.0)
FAMILIES = ("ml", "ma", "example2", "example3", "linear")

# per-family defaults: dimension, coefficient vector, covariate range
_DEFAULTS = {
    "ml": (10, None, (0.0, 1.0)),
    "ma": (10, MA_THETA, (0.0, 1.0)),
    "example2": (3, (1.0, -2.0, 1.5), (-1.0, 1.0)),
    "example3": (1, None, (-4.0, 4.0)),
    "linear": (3, (1.0, -2.0, 0.5), (0.0, 1.0)),
}


def _rows(x, d):
    X = np.asarray(x, dtype=float)
    single = X.ndim == 1
    X2 = X.reshape(1, -1) if single else X
    if X2.ndim != 2 or X2.shape[1] != d:
        raise ConfigError(f"expected {d} features per row, got shape {X.shape}")
    if not np.all(np.isfinite(X2)):
        raise ConfigError("features must be finite")
    return X2, single


def _out(v, single):
    return float(v[0]) if single else v


def f_ml(x):
    """Noiseless ``ml`` response for a 10-vector or an (n, 10) array."""
    X, single = _rows(x, 10)
    x1, x2, x3, x4, x5, x6, x7, x8, x9, x10 = X.T
    v = (np.exp(x1 - 0.5) + 2.0 * (x2 + x3 - 1.0) ** 2 + np.abs(x4 - 0.5)
         + np.exp(x5 - 1.0) + 2.0 * (x6 + 3.0 * x7 - 1.0) ** 2 + np.abs(x8 - 0.2)
         + x9 ** 2 + 0.5 * x10)
    return _out(v, single)


def _logistic(t):
    # split by sign so exp never sees a large positive argument
    t = np.asarray(t, dtype=float)
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def f_ma(x, theta=MA_THETA):
    """Noiseless ``ma`` response ``exp(t) / (1 + exp(t))`` with ``t = theta @ x``."""
    theta = np.asarray(theta, dtype=float)
    X, single = _rows(x, 10)
    if theta.shape != (10,):
        raise ConfigError("ma needs a 10-vector theta")
    return _out(_logistic(X @ theta), single)


@dataclass(frozen=True)
class GeneratorSpec:
    """Parameters of one synthetic family.

    ``d``, ``theta`` and ``x_range`` default per family when left as None.
    ``theta0`` is the offset of ``example2``.
    """

    family: str
    d: Optional[int] = None
    theta: Optional[tuple] = None
    seed: int = 0
    theta0: float = 5.0
    x_range: Optional[tuple] = None
    _theta: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown generator family {self.family!r}; expected one of {list(FAMILIES)}")
        d0, theta0, range0 = _DEFAULTS[self.family]
        d = d0 if self.d is None else int(self.d)
        if self.family in ("ml", "ma") and d != 10:
            raise ConfigError(f"family {self.family} needs d=10, got d={d}")
        if self.family == "example3" and d != 1:
            raise ConfigError(f"family example3 needs d=1, got d={d}")
        if d < 1:
            raise ConfigError(f"d must be positive, got {d}")
        theta = self.theta
        if theta is None and theta0 is not None:
            theta = theta0 if len(theta0) == d else tuple(np.resize(theta0, d).tolist())
        if theta is not None:
            theta = tuple(float(t) for t in theta)
            if len(theta) != d:
                raise ConfigError(f"theta has {len(theta)} entries for d={d}")
        lo, hi = range0 if self.x_range is None else self.x_range
        if not float(lo) < float(hi):
            raise ConfigError(f"x_range must satisfy low < high, got {(lo, hi)}")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "x_range", (float(lo), float(hi)))
        object.__setattr__(self, "_theta", None if theta is None else np.asarray(theta))

    def to_dict(self) -> dict:
        return dict(family=self.family, d=self.d, theta=None if self.theta is None else list(self.theta),
                    seed=int(self.seed), theta0=self.theta0, x_range=list(self.x_range))


def noiseless(spec: GeneratorSpec, X):
    """``f(X)``, the median demand at each context."""
    if spec.family == "ml":
        return f_ml(X)
    if spec.family == "ma":
        return f_ma(X, spec.theta)
    Xr, single = _rows(X, spec.d)
    if spec.family == "example2":
        v = np.abs(Xr @ spec._theta) + spec.theta0
    elif spec.family == "example3":
        x = Xr[:, 0]
        v = np.where(x > 0, 2.0 * np.abs(x) + 2.0, 4.0 * np.abs(x) + 2.0)
    else:
        v = Xr @ spec._theta
    return _out(v, single)


def true_quantile(spec: GeneratorSpec, X, alpha: float):
    """Conditional alpha-quantile of demand, ``f(x) + ndtri(alpha)``."""
    alpha = check_level(alpha)
    return noiseless(spec, X) + float(ndtri(alpha))


def _block(spec: GeneratorSpec, b: int, rows: int):
    rng = RngStream(int(spec.seed), b)
    lo, hi = spec.x_range
    X = rng.uniform((rows, spec.d), lo, hi)
    eps = rng.normal(rows)
    return X, eps


def generate(spec: GeneratorSpec, n: int) -> Dataset:
    """Draw ``n`` rows of ``(X, Y)`` with ``Y = f(X) + N(0, 1)``.

    Block ``b`` always uses stream ``(seed, b)`` and always draws a full
    block, so the first ``n`` rows are a prefix of any longer draw.
    """
    n = int(n)
    if n < 1:
        raise ConfigError(f"n must be at least 1, got {n}")
    nblocks = math.ceil(n / BLOCK)
    parts = [_block(spec, b, BLOCK) for b in range(nblocks)]
    X = np.concatenate([p[0] for p in parts])[:n]
    eps = np.concatenate([p[1] for p in parts])[:n]
    y = np.asarray(noiseless(spec, X), dtype=float) + eps
    return Dataset(X, y)


def export_csv(spec: GeneratorSpec, n: int, path) -> Dataset:
    """Generate and write a dataset in the core CSV format."""
    data = generate(spec, n)
    write_csv(data, path)
    return data
