"""Split-conformal correction of quantile predictions.

A base quantile model is trained on one part of the data; the signed
residuals ``s_i = y_i - q(x_i)`` on a held-out calibration part give an
additive correction, either global or pooled from the calibration points
near each query.  :func:`gtlc_select` chooses the pooling size by K-fold
validation over the calibration scores while training only once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import NamedTuple, Optional, Sequence

import numpy as np

from ._accel import kernels as _k
from .core import Dataset, RngStream
from .errors import ConfigError, EmptyPoolError, InsufficientDataError
from .loss import check_level, pinball_array, quantile_rank
from .neighbors import NeighborIndex, PoolingSpec

__all__ = [
    "ConformalQuantile",
    "ConformityScores",
    "CalibratedModel",
    "GTLCResult",
    "conformal_quantile",
    "conformal_rank",
    "calibrate",
    "cqpc_fit",
    "predict_calibrated",
    "gtlc_select",
    "coverage_bounds",
    "reference_interval",
]


class ConformalQuantile(NamedTuple):
    value: float
    clamped: bool


def conformal_rank(alpha: float, n2: int) -> tuple:
    """``(k, clamped)`` with ``k = ceil(alpha (n2 + 1))`` clamped into ``[1, n2]``."""
    k = quantile_rank(alpha, n2, inflate=True)
    if k > n2:
        return n2, True
    if k < 1:
        return 1, True
    return k, False


def conformal_quantile(scores, alpha: float) -> ConformalQuantile:
    """Inflated empirical quantile of calibration scores.

    Returns the ``k``-th smallest score, ``k = ceil(alpha (n2 + 1))``.  When
    ``k`` falls outside ``1..n2`` the nearest extreme score is returned and
    ``clamped`` is set.

    Examples
    --------
    >>> conformal_quantile([-3, -1, 2, 5], 0.5)
    ConformalQuantile(value=2.0, clamped=False)
    """
    alpha = check_level(alpha)
    s = np.asarray(scores, dtype=float).ravel()
    if s.size == 0:
        raise ValueError("conformal_quantile needs at least one score")
    k, clamped = conformal_rank(alpha, s.size)
    return ConformalQuantile(float(np.partition(s, k - 1)[k - 1]), clamped)


@dataclass(frozen=True, eq=False)
class ConformityScores:
    """Signed calibration residuals and the rows they came from."""

    scores: np.ndarray
    source_indices: np.ndarray

    def __post_init__(self):
        s = np.array(self.scores, dtype=float).ravel()
        idx = np.array(self.source_indices, dtype=np.int64).ravel()
        if s.shape != idx.shape:
            raise ValueError("scores and source_indices differ in length")
        s.flags.writeable = False
        idx.flags.writeable = False
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "source_indices", idx)

    def __len__(self):
        return self.scores.shape[0]

    @classmethod
    def from_model(cls, model, X, y, source_indices=None) -> "ConformityScores":
        y = np.asarray(y, dtype=float)
        s = y - model.predict(np.asarray(X, dtype=float))
        if source_indices is None:
            source_indices = np.arange(s.shape[0])
        return cls(s, source_indices)


def _scaler(X, enabled=True):
    X = np.asarray(X, dtype=float)
    if not enabled or X.shape[0] < 2:
        return np.zeros(X.shape[1]), np.ones(X.shape[1])
    mean = X.mean(axis=0)
    scale = X.std(axis=0, ddof=1)
    return mean, np.where(scale > 0, scale, 1.0)


class _Pool:
    """Scores plus a neighbour index over their (scaled) contexts."""

    def __init__(self, scores, Z):
        self.scores = np.ascontiguousarray(scores, dtype=float)
        self.Z = Z
        self._index = None

    @property
    def index(self) -> NeighborIndex:
        if self._index is None:
            self._index = NeighborIndex(self.Z)
        return self._index

    def corrections(self, Zq, alpha, pooling: PoolingSpec):
        """Per-query ``(correction, clamped)`` arrays."""
        q = Zq.shape[0]
        n2 = self.scores.shape[0]
        if pooling.mode == "all":
            v, c = conformal_quantile(self.scores, alpha)
            return np.full(q, v), np.full(q, c)
        if pooling.mode == "count":
            m = pooling.m
            if m > n2:
                raise InsufficientDataError(f"count pooling m={m} exceeds the {n2} calibration scores")
            k, c = conformal_rank(alpha, m)
            idx = self.index.k_nearest_batch(Zq, m)
            return _k.rowwise_kth(self.scores, idx, k), np.full(q, c)
        indptr, indices = self.index.within_radius_batch(Zq, pooling.xi)
        sizes = np.diff(indptr)
        if q and sizes.min() == 0:
            raise EmptyPoolError(pooling.xi)
        ranks = [conformal_rank(alpha, int(m)) for m in sizes]
        ks = np.array([r[0] for r in ranks], dtype=np.int64)
        clamped = np.array([r[1] for r in ranks], dtype=bool)
        return _k.csr_kth(self.scores, indptr, indices, ks), clamped


@dataclass(eq=False)
class CalibratedModel:
    """Base quantile model plus conformity scores and a pooling rule.

    ``scale`` is the ``(mean, scale)`` map used to put query and
    calibration contexts on a common footing before distances are taken.
    """

    base: object
    calibration: ConformityScores
    calib_features: np.ndarray
    alpha: float
    pooling: PoolingSpec = field(default_factory=PoolingSpec.all)
    scale: tuple = None
    _pool: Optional[_Pool] = field(default=None, repr=False)

    def __post_init__(self):
        self.alpha = check_level(self.alpha)
        X = np.asarray(self.calib_features, dtype=float)
        if X.ndim != 2 or X.shape[0] != len(self.calibration):
            raise ValueError("calibration features do not match the scores")
        if len(self.calibration) < 1:
            raise InsufficientDataError("calibration set is empty")
        if self.scale is None:
            self.scale = _scaler(X)
        self.calib_features = X
        mean, scale = self.scale
        self._pool = _Pool(self.calibration.scores, (X - mean) / scale)

    @property
    def n2(self) -> int:
        return len(self.calibration)

    def with_pooling(self, pooling: PoolingSpec) -> "CalibratedModel":
        out = CalibratedModel(self.base, self.calibration, self.calib_features, self.alpha,
                              pooling, self.scale)
        out._pool = self._pool  # share the neighbour index
        return out

    def corrections(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        mean, scale = self.scale
        return self._pool.corrections((X - mean) / scale, self.alpha, self.pooling)

    def predict(self, X):
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        X2 = X.reshape(1, -1) if single else X
        base = np.asarray(self.base.predict(X2), dtype=float)
        corr, _ = self.corrections(X2)
        out = base + corr
        return float(out[0]) if single else out


def calibrate(base, calib: Dataset, alpha: float, pooling: Optional[PoolingSpec] = None,
              scale=None, source_indices=None) -> CalibratedModel:
    """Wrap an already fitted base model with scores from ``calib``."""
    scores = ConformityScores.from_model(base, calib.features, calib.demand, source_indices)
    return CalibratedModel(base, scores, calib.features, alpha, pooling or PoolingSpec.all(), scale)


def cqpc_fit(train: Dataset, calib: Dataset, alpha: float, learner,
             pooling: Optional[PoolingSpec] = None, standardize: bool = True) -> CalibratedModel:
    """Fit ``learner`` on ``train`` and calibrate it on ``calib``.

    Distances for local pooling are measured after scaling features by the
    training set's mean and sample standard deviation (``standardize``).
    """
    if train.n < 1 or calib.n < 1:
        raise InsufficientDataError("training and calibration sets must be nonempty")
    base = learner.fit(train.features, train.demand, alpha)
    scale = _scaler(train.features, standardize)
    return calibrate(base, calib, alpha, pooling, scale)


def predict_calibrated(model: CalibratedModel, x):
    """Calibrated prediction for one feature vector or a batch of rows."""
    return model.predict(x)


@dataclass
class GTLCResult:
    best: PoolingSpec
    table: list

    def as_rows(self):
        return [dict(pooling=r["pooling"].label(), mean_loss=r["mean_loss"],
                     feasible=r["feasible"]) for r in self.table]


def gtlc_select(train: Dataset, calib: Dataset, alpha: float, learner,
                candidates: Sequence[PoolingSpec], folds: int = 5, seed: int = 0,
                standardize: bool = True, base=None) -> GTLCResult:
    """Choose a pooling rule by K-fold validation over the calibration set.

    The learner is fitted once on ``train`` (or ``base`` is used as is).
    The calibration rows are shuffled with ``seed`` and cut into ``folds``
    contiguous blocks; each block in turn is the validation fold and is
    corrected using only the other blocks' scores.  A candidate's loss is
    the mean over folds of the fold's mean pinball loss.  Candidates that
    cannot be evaluated on some fold are reported as infeasible.  Ties go to
    the smaller pool, then to the earlier candidate.
    """
    alpha = check_level(alpha)
    folds = int(folds)
    if folds < 2:
        raise ConfigError("gtlc_select needs at least two folds")
    if not candidates:
        raise ConfigError("gtlc_select needs at least one candidate")
    if calib.n < folds:
        raise InsufficientDataError(f"{calib.n} calibration rows cannot form {folds} folds")
    if base is None:
        base = learner.fit(train.features, train.demand, alpha)
    mean, scale = _scaler(train.features, standardize)
    Z = (calib.features - mean) / scale
    scores = calib.demand - base.predict(calib.features)
    perm = RngStream(seed, 0).permutation(calib.n)
    blocks = np.array_split(perm, folds)

    fold_losses = [[] for _ in candidates]
    feasible = [True] * len(candidates)
    for b in range(folds):
        val = np.sort(blocks[b])
        rest = np.sort(np.concatenate([blocks[j] for j in range(folds) if j != b]))
        pool = _Pool(scores[rest], Z[rest])
        for c, cand in enumerate(candidates):
            if not feasible[c]:
                continue
            try:
                corr, _ = pool.corrections(Z[val], alpha, cand)
            except (EmptyPoolError, InsufficientDataError):
                feasible[c] = False
                continue
            # pinball of the corrected prediction equals pinball of score - correction
            fold_losses[c].append(float(pinball_array(corr, scores[val], alpha).mean()))

    table = []
    for c, cand in enumerate(candidates):
        loss = float(np.mean(fold_losses[c])) if feasible[c] else math.nan
        table.append(dict(pooling=cand, mean_loss=loss, feasible=feasible[c],
                          fold_losses=list(fold_losses[c]) if feasible[c] else []))
    ok = [c for c in range(len(candidates)) if feasible[c]]
    if not ok:
        raise InsufficientDataError("every pooling candidate is infeasible for the fold sizes")
    best = min(ok, key=lambda c: (table[c]["mean_loss"], candidates[c].size_key, c))
    return GTLCResult(candidates[best], table)


def coverage_bounds(n2: int, alpha: float) -> tuple:
    """Bracket ``(alpha, alpha + 1/(n2 + 1))`` on unconditional coverage."""
    alpha = check_level(alpha)
    n2 = int(n2)
    if n2 < 1:
        raise ValueError("n2 must be at least 1")
    return alpha, alpha + 1.0 / (n2 + 1)


def reference_interval(x, base, abs_scores, alpha: float) -> tuple:
    """Symmetric split-conformal interval ``yhat +/- Q`` around a mean model.

    ``Q`` is the ``ceil((1 - alpha)(n2 + 1))``-th smallest absolute
    residual, clamped to the largest one when that rank exceeds ``n2``.
    """
    alpha = check_level(alpha)
    r = np.abs(np.asarray(abs_scores, dtype=float).ravel())
    if r.size == 0:
        raise ValueError("reference_interval needs at least one score")
    k = math.ceil((1 - Fraction(repr(alpha))) * (r.size + 1))
    k = min(max(k, 1), r.size)
    half = float(np.partition(r, k - 1)[k - 1])
    yhat = base.predict(np.asarray(x, dtype=float)) if hasattr(base, "predict") else base(x)
    return yhat - half, yhat + half
