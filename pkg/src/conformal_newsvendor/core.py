"""Datasets, cost parameters, seeded randomness and data splitting."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DataError, InsufficientDataError
from .normal import ndtri

__all__ = [
    "Dataset",
    "CostParams",
    "SplitSpec",
    "RngStream",
    "split",
    "standardize",
    "read_csv",
    "write_csv",
]


def _frozen(a, ndim, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    if a.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d array, got shape {a.shape}")
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature matrix plus demand vector.

    Arrays are copied and made read-only on construction.  ``standardization``
    is an optional ``(mean, scale)`` pair describing the transform that was
    applied to produce ``features``; :meth:`transform` applies the same map to
    new rows.
    """

    features: np.ndarray
    demand: np.ndarray
    feature_names: tuple = ()
    standardization: Optional[tuple] = None

    def __post_init__(self):
        X = _frozen(self.features, 2)
        y = _frozen(self.demand, 1)
        if X.shape[0] != y.shape[0]:
            raise DataError(f"{X.shape[0]} feature rows but {y.shape[0]} demand values")
        if X.shape[0] < 1 or X.shape[1] < 1:
            raise DataError(f"dataset must have n >= 1 and d >= 1, got shape {X.shape}")
        names = tuple(self.feature_names) or tuple(f"x{j + 1}" for j in range(X.shape[1]))
        if len(names) != X.shape[1]:
            raise DataError(f"{len(names)} feature names for {X.shape[1]} columns")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "demand", y)
        object.__setattr__(self, "feature_names", names)
        if self.standardization is not None:
            mean, scale = self.standardization
            mean, scale = _frozen(mean, 1), _frozen(scale, 1)
            if mean.shape[0] != X.shape[1] or scale.shape[0] != X.shape[1]:
                raise DataError("standardization size does not match feature count")
            if np.any(scale <= 0):
                raise DataError("standardization scales must be strictly positive")
            object.__setattr__(self, "standardization", (mean, scale))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def __len__(self):
        return self.n

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.intp)
        return Dataset(self.features[idx], self.demand[idx], self.feature_names,
                       self.standardization)

    def transform(self, X) -> np.ndarray:
        """Apply the recorded standardization to raw feature rows."""
        X = np.asarray(X, dtype=float)
        if self.standardization is None:
            return X.copy()
        mean, scale = self.standardization
        return (X - mean) / scale

    def with_demand(self, demand) -> "Dataset":
        return Dataset(self.features, demand, self.feature_names, self.standardization)


@dataclass(frozen=True)
class CostParams:
    """Per-unit overage (``c_o``) and underage (``c_u``) costs."""

    c_o: float
    c_u: float

    def __post_init__(self):
        if not (self.c_o > 0 and self.c_u > 0):
            raise ValueError(f"costs must be positive, got c_o={self.c_o}, c_u={self.c_u}")

    @property
    def alpha(self) -> float:
        return self.c_u / (self.c_o + self.c_u)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.75
    calib_fraction: float = 0.15
    test_fraction: float = 0.10
    seed: int = 0

    def __post_init__(self):
        fr = (self.train_fraction, self.calib_fraction, self.test_fraction)
        if not all(0.0 < f < 1.0 for f in fr):
            raise ValueError(f"split fractions must lie in (0, 1), got {fr}")
        if abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(fr)!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    def sizes(self, n: int) -> tuple:
        n_train = math.floor(n * self.train_fraction + 0.5)
        n_calib = math.floor(n * self.calib_fraction + 0.5)
        n_test = n - n_train - n_calib
        if n_test < 0:
            n_calib += n_test
            n_test = 0
        return n_train, n_calib, n_test


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream keyed by ``(seed, stream_id)``.

    Backed by numpy's Philox generator so identical keys reproduce the same
    draws everywhere.  Use one stream per worker or replication.
    """

    seed: int
    stream_id: int = 0
    _gen: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        for name in ("seed", "stream_id"):
            v = int(getattr(self, name))
            if not 0 <= v < 2**64:
                raise ValueError(f"{name} must be an unsigned 64-bit integer, got {v}")
        ss = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.stream_id),))
        object.__setattr__(self, "_gen", np.random.Generator(np.random.Philox(ss)))

    def spawn(self, stream_id: int) -> "RngStream":
        """Child stream; distinct ``stream_id`` values never overlap."""
        child = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.stream_id), int(stream_id)))
        return RngStream(int(child.generate_state(1, np.uint64)[0]), 0)

    def uniform(self, size=None, low=0.0, high=1.0):
        """Uniform draws on the open interval ``(low, high)``."""
        bits = self._gen.integers(0, 2**53, size=size, dtype=np.int64)
        u = (bits + 0.5) / 2.0**53
        return low + (high - low) * u

    def normal(self, size=None):
        """Standard normal draws by inverse-CDF transform of :meth:`uniform`."""
        return ndtri(self.uniform(size))

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size, dtype=np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)``, in draw order."""
        return self._gen.choice(n, size=k, replace=False)


def split(dataset: Dataset, spec: SplitSpec):
    """Seeded train / calibration / test partition of the row indices.

    Returns three sorted index arrays.  Train and calibration sizes are
    ``round(n * fraction)``; the test set takes the remainder.
    """
    n = dataset.n
    sizes = spec.sizes(n)
    for name, size in zip(("train", "calibration", "test"), sizes):
        if size <= 0:
            raise InsufficientDataError(f"insufficient data: {name} split is empty for n={n}")
    perm = RngStream(spec.seed, 0).permutation(n)
    a, b, _ = sizes
    return np.sort(perm[:a]), np.sort(perm[a:a + b]), np.sort(perm[a + b:])


def standardize(dataset: Dataset) -> Dataset:
    """Centre each feature and scale it to unit sample standard deviation.

    Zero-variance columns are centred and keep scale 1.
    """
    X = dataset.features
    if X.shape[0] < 2:
        raise InsufficientDataError("standardize needs at least two rows")
    mean = X.mean(axis=0)
    scale = X.std(axis=0, ddof=1)
    scale = np.where(scale > 0, scale, 1.0)
    return Dataset((X - mean) / scale, dataset.demand, dataset.feature_names, (mean, scale))


def read_csv(path, target: str = "demand", features: Optional[Sequence[str]] = None) -> Dataset:
    """Load a headered UTF-8 CSV.

    ``target`` names the demand column.  When ``features`` is None every
    other column is used as a feature.  Non-numeric cells in used columns
    raise :class:`DataError` quoting the file line number.
    """
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path} is empty") from None
        if features is None:
            features = [h for h in header if h != target]
        wanted = list(features) + [target]
        missing = [c for c in wanted if c not in header]
        if missing:
            raise DataError(f"{path} is missing columns: {', '.join(missing)}")
        cols = [header.index(c) for c in wanted]
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                rows.append([float(row[c]) for c in cols])
            except (ValueError, IndexError):
                raise DataError(f"{path}: non-numeric or missing value on line {line_no}") from None
    if not rows:
        raise DataError(f"{path} has no data rows")
    data = np.asarray(rows, dtype=float)
    if not np.all(np.isfinite(data)):
        bad = int(np.nonzero(~np.all(np.isfinite(data), axis=1))[0][0]) + 2
        raise DataError(f"{path}: non-finite value on line {bad}")
    return Dataset(data[:, :-1], data[:, -1], tuple(features))


def write_csv(dataset: Dataset, path, target: str = "demand") -> None:
    """Write ``dataset`` as CSV with full float precision (``repr``)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(dataset.feature_names) + [target])
        for x, y in zip(dataset.features.tolist(), dataset.demand.tolist()):
            w.writerow([repr(v) for v in x] + [repr(y)])
