"""Quantile learners behind one fit/predict contract.

Three learners are provided: an affine model fitted by smoothed
check-loss descent, gradient-boosted regression trees with quantile leaves,
and a k-nearest-neighbour empirical quantile.  Every learner config has a
``fit(X, y, alpha)`` method returning a :class:`QuantileModel`; the
module-level ``fit_*`` functions take a :class:`~.core.Dataset` instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from ._accel import kernels as _k
from .core import Dataset, RngStream
from .errors import ConfigError, DegenerateTreeError
from .loss import check_level, empirical_quantile, pinball_array, quantile_rank
from .neighbors import NeighborIndex

__all__ = [
    "QuantileModel",
    "LinearQRConfig",
    "LinearQuantileModel",
    "GBQConfig",
    "GBQuantileModel",
    "KNNQConfig",
    "KNNQuantileModel",
    "FixedModel",
    "fit_linear_qr",
    "fit_gbq",
    "fit_knnq",
    "make_learner",
    "LEARNERS",
]


def _as_xy(X, y=None):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError("training features must be a non-empty 2-d array")
    if y is None:
        return X
    y = np.asarray(y, dtype=float).ravel()
    if y.shape[0] != X.shape[0]:
        raise ValueError(f"{X.shape[0]} feature rows but {y.shape[0]} targets")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite training data")
    return X, y


class QuantileModel:
    """Fitted conditional-quantile predictor at a single level ``alpha``.

    Subclasses implement :meth:`_predict` on a 2-d array.  :meth:`predict`
    also accepts a single feature vector and then returns a float.
    """

    alpha: float
    d: int

    def predict(self, X):
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        X2 = X.reshape(1, -1) if single else X
        if X2.ndim != 2 or X2.shape[1] != self.d:
            raise ValueError(f"expected {self.d} features, got shape {X.shape}")
        out = self._predict(X2)
        return float(out[0]) if single else out

    def _predict(self, X):  # pragma: no cover - abstract
        raise NotImplementedError

    def loss(self, X, y) -> float:
        return float(pinball_array(self.predict(np.asarray(X, dtype=float)), y, self.alpha).mean())


class FixedModel(QuantileModel):
    """A known function plus a constant shift; fitting is a no-op.

    Used as an oracle base model in tests and theory checks.
    """

    def __init__(self, fn: Callable, alpha: float, d: int, bias: float = 0.0):
        self.fn = fn
        self.alpha = check_level(alpha)
        self.d = int(d)
        self.bias = float(bias)

    def _predict(self, X):
        return np.asarray(self.fn(X), dtype=float).reshape(-1) + self.bias

    def shifted(self, b: float) -> "FixedModel":
        return FixedModel(self.fn, self.alpha, self.d, self.bias + b)


@dataclass(frozen=True)
class FixedLearner:
    """Learner config wrapping a level-dependent known function ``fn(X, alpha)``."""

    fn: Callable
    bias: float = 0.0
    name: str = "fixed"

    def fit(self, X, y, alpha) -> FixedModel:
        X = _as_xy(X)
        fn = self.fn
        return FixedModel(lambda Z: fn(Z, alpha), alpha, X.shape[1], self.bias)


# ---------------------------------------------------------------------------
# linear quantile regression


@dataclass(frozen=True)
class LinearQRConfig:
    """Affine quantile regression ``a + theta . x``.

    Minimises mean pinball loss plus ``ridge_lambda * ||theta||^2``.  The
    check loss is replaced by a logistic-smoothed version whose bandwidth
    shrinks from ``smoothing`` to ``smoothing_min`` by ``smoothing_decay``;
    each stage runs gradient descent with Barzilai-Borwein steps (the first
    step is ``step_init``, or the bandwidth when 0).  With no ridge term
    the result is polished onto the nearest exact interpolating vertex when
    that lowers the true objective.
    """

    ridge_lambda: float = 0.0
    max_iters: int = 20000
    tol: float = 1e-9
    step_init: float = 0.0
    smoothing: float = 0.5
    smoothing_min: float = 1e-5
    smoothing_decay: float = 0.2
    polish: bool = True
    name: str = "linear_qr"

    def __post_init__(self):
        if not self.ridge_lambda >= 0:
            raise ConfigError("ridge_lambda must be nonnegative")
        if int(self.max_iters) < 1:
            raise ConfigError("max_iters must be at least 1")
        if not self.tol > 0:
            raise ConfigError("tol must be positive")
        if not (self.smoothing > 0 and 0 < self.smoothing_min <= self.smoothing):
            raise ConfigError("need 0 < smoothing_min <= smoothing")
        if not 0 < self.smoothing_decay < 1:
            raise ConfigError("smoothing_decay must lie in (0, 1)")
        if self.step_init < 0:
            raise ConfigError("step_init must be nonnegative")

    def fit(self, X, y, alpha) -> "LinearQuantileModel":
        alpha = check_level(alpha)
        X, y = _as_xy(X, y)
        n, d = X.shape
        mu = X.mean(axis=0)
        s = X.std(axis=0)
        active = s > 0
        s = np.where(active, s, 1.0)
        Z = np.where(active, (X - mu) / s, 0.0)
        c = empirical_quantile(y, alpha)
        sy = float(np.mean(np.abs(y - c)))
        if not sy > 0:
            sy = 1.0
        t = (y - c) / sy
        A = np.ascontiguousarray(np.column_stack([np.ones(n), Z]))
        penalty = np.concatenate([[0.0], self.ridge_lambda * sy / s**2])
        beta, iters, converged = _k.smoothed_qr(
            A, t, alpha, penalty, self.smoothing, self.smoothing_min, self.smoothing_decay,
            self.step_init, int(self.max_iters), self.tol)
        beta = np.asarray(beta, dtype=float)
        if self.polish and self.ridge_lambda == 0.0:
            beta = _polish_vertex(A, t, alpha, beta, np.concatenate([[True], active]))
        b, w = beta[0], beta[1:]
        theta = np.where(active, sy * w / s, 0.0)
        intercept = c + sy * b - float(theta @ mu)
        return LinearQuantileModel(alpha, theta, intercept, iters, bool(converged))


def _scaled_objective(A, t, alpha, beta):
    u = t - A @ beta
    return float(np.mean(np.where(u >= 0, alpha * u, (alpha - 1.0) * u)))


def _polish_vertex(A, t, alpha, beta, cols):
    """Try the interpolating solution through the smallest residuals.

    A check-loss minimiser without a ridge term sits at a vertex where as
    many residuals as free parameters vanish; the smoothed solution is
    usually within a bandwidth of it.
    """
    p = int(cols.sum())
    n = A.shape[0]
    if n < p:
        return beta
    u = t - A @ beta
    near = np.argsort(np.abs(u), kind="stable")[:p]
    sub = A[np.ix_(near, np.nonzero(cols)[0])]
    try:
        sol = np.linalg.solve(sub, t[near])
    except np.linalg.LinAlgError:
        return beta
    cand = np.zeros_like(beta)
    cand[cols] = sol
    if not np.all(np.isfinite(cand)):
        return beta
    if _scaled_objective(A, t, alpha, cand) <= _scaled_objective(A, t, alpha, beta):
        return cand
    return beta


class LinearQuantileModel(QuantileModel):
    def __init__(self, alpha, theta, intercept, iterations=0, converged=True):
        self.alpha = check_level(alpha)
        self.theta = np.asarray(theta, dtype=float)
        self.intercept = float(intercept)
        self.d = self.theta.shape[0]
        self.iterations = int(iterations)
        self.converged = bool(converged)

    def _predict(self, X):
        return X @ self.theta + self.intercept

    def __repr__(self):
        return f"LinearQuantileModel(alpha={self.alpha}, theta={self.theta!r}, intercept={self.intercept!r})"


def fit_linear_qr(train: Dataset, alpha, config: Optional[LinearQRConfig] = None):
    return (config or LinearQRConfig()).fit(train.features, train.demand, alpha)


# ---------------------------------------------------------------------------
# gradient-boosted quantile trees


@dataclass(frozen=True)
class GBQConfig:
    """Gradient boosting with pinball-subgradient trees and quantile leaves."""

    n_trees: int = 200
    max_depth: int = 3
    learning_rate: float = 0.05
    min_leaf: int = 10
    subsample: float = 1.0
    seed: int = 0
    name: str = "gb"

    def __post_init__(self):
        if int(self.n_trees) < 0:
            raise ConfigError("n_trees must be nonnegative")
        if int(self.max_depth) < 1:
            raise ConfigError("max_depth must be at least 1")
        if not 0 < self.learning_rate <= 1:
            raise ConfigError("learning_rate must lie in (0, 1]")
        if int(self.min_leaf) < 1:
            raise ConfigError("min_leaf must be at least 1")
        if not 0 < self.subsample <= 1:
            raise ConfigError("subsample must lie in (0, 1]")

    @classmethod
    def lite(cls, **kw) -> "GBQConfig":
        """Deeper, faster-learning preset with row subsampling."""
        base = dict(n_trees=100, max_depth=6, learning_rate=0.1, min_leaf=20, subsample=0.8,
                    name="gb_lite")
        base.update(kw)
        return cls(**base)

    def fit(self, X, y, alpha) -> "GBQuantileModel":
        alpha = check_level(alpha)
        X, y = _as_xy(X, y)
        n, d = X.shape
        if self.min_leaf > n:
            raise DegenerateTreeError(f"degenerate tree: min_leaf={self.min_leaf} exceeds n={n}")
        X = np.ascontiguousarray(X)
        base = empirical_quantile(y, alpha)
        F = np.full(n, base)
        presorted = np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T.astype(np.int64))
        rng = RngStream(self.seed, 0)
        n_bag = max(1, math.floor(self.subsample * n + 0.5))
        trees = []
        for _ in range(int(self.n_trees)):
            if n_bag < n:
                inbag = np.zeros(n, dtype=bool)
                inbag[rng.choice(n, n_bag)] = True
                order = np.ascontiguousarray(presorted[inbag[presorted]].reshape(d, n_bag))
            else:
                order = presorted
            # y == F counts as overage so exact fits still produce a split signal
            g = np.where(y <= F, alpha - 1.0, alpha)
            tree = _grow_tree(X, y - F, g, order, alpha, self)
            F = F + tree.predict(X)
            trees.append(tree)
        return GBQuantileModel(alpha, d, base, trees)


class _Tree:
    __slots__ = ("feature", "threshold", "left", "right", "value")

    def __init__(self, feature, threshold, left, right, value):
        self.feature = np.asarray(feature, dtype=np.int64)
        self.threshold = np.asarray(threshold, dtype=float)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.value = np.asarray(value, dtype=float)

    def predict(self, X):
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            rows = np.nonzero(active)[0]
            nd = node[rows]
            go_left = X[rows, self.feature[nd]] <= self.threshold[nd]
            node[rows] = np.where(go_left, self.left[nd], self.right[nd])
            active = self.feature[node] >= 0
        return self.value[node]


def _grow_tree(X, resid, g, order, alpha, cfg: GBQConfig) -> _Tree:
    feature, threshold, left, right, value = [], [], [], [], []
    n = X.shape[0]
    mask = np.zeros(n, dtype=bool)

    def add_leaf(rows):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(cfg.learning_rate * empirical_quantile(resid[rows], alpha))
        return len(feature) - 1

    # depth-first, left child first; nodes are appended before children
    def build(order, depth):
        rows = order[0]
        if depth >= cfg.max_depth or rows.shape[0] < 2 * cfg.min_leaf:
            return add_leaf(rows)
        gain, f, thr, n_left = _k.best_split(X, g, order, cfg.min_leaf, 1e-12)
        if f < 0:
            return add_leaf(rows)
        lrows = order[f, :n_left]
        mask[lrows] = True
        keep = mask[order]
        lorder = np.ascontiguousarray(order[keep].reshape(order.shape[0], n_left))
        rorder = np.ascontiguousarray(order[~keep].reshape(order.shape[0], -1))
        mask[lrows] = False
        idx = len(feature)
        feature.append(int(f))
        threshold.append(float(thr))
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        left[idx] = build(lorder, depth + 1)
        right[idx] = build(rorder, depth + 1)
        return idx

    build(order, 0)
    return _Tree(feature, threshold, left, right, value)


class GBQuantileModel(QuantileModel):
    def __init__(self, alpha, d, base, trees):
        self.alpha = check_level(alpha)
        self.d = int(d)
        self.base = float(base)
        self.trees = list(trees)

    def _predict(self, X):
        out = np.full(X.shape[0], self.base)
        for tree in self.trees:
            out = out + tree.predict(X)
        return out


def fit_gbq(train: Dataset, alpha, config: Optional[GBQConfig] = None):
    return (config or GBQConfig()).fit(train.features, train.demand, alpha)


# ---------------------------------------------------------------------------
# k-nearest-neighbour quantile


@dataclass(frozen=True)
class KNNQConfig:
    """Empirical quantile of the ``k`` nearest training demands."""

    k: int = 50
    name: str = "knn"

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 1:
            raise ConfigError("k must be an integer >= 1")

    def fit(self, X, y, alpha) -> "KNNQuantileModel":
        alpha = check_level(alpha)
        X, y = _as_xy(X, y)
        if self.k > X.shape[0]:
            raise ConfigError(f"k={self.k} exceeds the {X.shape[0]} training points")
        mean = X.mean(axis=0)
        scale = X.std(axis=0, ddof=1) if X.shape[0] > 1 else np.ones(X.shape[1])
        scale = np.where(scale > 0, scale, 1.0)
        return KNNQuantileModel(alpha, int(self.k), y, NeighborIndex((X - mean) / scale), mean, scale)


class KNNQuantileModel(QuantileModel):
    def __init__(self, alpha, k, y, index, mean, scale):
        self.alpha = check_level(alpha)
        self.k = k
        self.y = np.asarray(y, dtype=float)
        self.index = index
        self.mean = mean
        self.scale = scale
        self.d = index.d
        self.rank = max(quantile_rank(self.alpha, k), 1)

    def _predict(self, X):
        idx = self.index.k_nearest_batch((X - self.mean) / self.scale, self.k)
        return _k.rowwise_kth(self.y, idx, self.rank)


def fit_knnq(train: Dataset, alpha, config: Optional[KNNQConfig] = None):
    return (config or KNNQConfig()).fit(train.features, train.demand, alpha)


# ---------------------------------------------------------------------------
# registry

LEARNERS = {
    "linear_qr": LinearQRConfig,
    "gb": GBQConfig,
    "gb_lite": GBQConfig.lite,
    "knn": KNNQConfig,
}


def make_learner(name: str, **params):
    """Build a learner config by registry name."""
    try:
        factory = LEARNERS[name]
    except KeyError:
        raise ConfigError(f"unknown learner {name!r}; expected one of {sorted(LEARNERS)}") from None
    try:
        cfg = factory(**params)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for learner {name!r}: {exc}") from None
    return cfg if cfg.name == name else replace(cfg, name=name)
