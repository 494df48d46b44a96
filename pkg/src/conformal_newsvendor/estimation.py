"""Estimating margin and gap functions from data, and the iterative
diameter-selection loop built on them.

Margins are read off fitted quantile curves.  If ``f_t`` is the fitted
``t``-quantile, then ``f_{alpha+p}(x) - f_alpha(x)`` is the demand offset at
which the conditional probability has risen by ``p``.  The smallest such
offset over the data gives a point ``(offset, p)`` on the upper margin, the
largest a point on the lower margin.  The gap function is estimated from
differences of excess test loss between pairs of contexts and summarised by
a log-linear fit of ``C sqrt(xi^nu / n1)``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.spatial.distance import pdist

from .bounds import GapSpec, RegionModel, margin_table, two_approx_pool_search
from .core import Dataset, RngStream, standardize
from .errors import ConfigError, DataError, NoCrossingError
from .loss import check_level, pinball_array
from .neighbors import NeighborIndex

__all__ = [
    "pava",
    "MarginTable",
    "KappaTable",
    "estimate_margins",
    "estimate_kappa",
    "fit_kappa",
    "fit_density_exponent",
    "cluster_by_diameter",
    "Algorithm3Result",
    "algorithm3_loop",
]


def pava(y, w=None) -> np.ndarray:
    """Nondecreasing least-squares fit by pool-adjacent-violators.

    Parameters
    ----------
    y : array_like
        Values in their natural order.
    w : array_like, optional
        Positive weights (default all ones).

    Returns
    -------
    numpy.ndarray
        The isotonic fit, same length as ``y``.
    """
    y = np.asarray(y, dtype=float).ravel()
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=float).ravel()
    if y.shape != w.shape:
        raise ValueError("y and w differ in length")
    means, weights, counts = [], [], []
    for yi, wi in zip(y.tolist(), w.tolist()):
        means.append(yi)
        weights.append(wi)
        counts.append(1)
        while len(means) > 1 and means[-2] > means[-1]:
            m2, w2, c2 = means.pop(), weights.pop(), counts.pop()
            m1, w1, c1 = means.pop(), weights.pop(), counts.pop()
            wt = w1 + w2
            means.append((m1 * w1 + m2 * w2) / wt)
            weights.append(wt)
            counts.append(c1 + c2)
    return np.repeat(means, counts)


# ---------------------------------------------------------------------------
# margins


@dataclass
class MarginTable:
    """Monotone margin estimates on a grid of demand offsets.

    ``h_upper_hat`` and ``h_lower_hat`` are nondecreasing, nonnegative,
    ordered (lower <= upper) and interpolated linearly through ``(0, 0)``.
    ``knots`` keeps the raw ``(offset, probability)`` points they came from.
    """

    deltas: np.ndarray
    h_upper_hat: np.ndarray
    h_lower_hat: np.ndarray
    knots: dict = field(default_factory=dict)

    @classmethod
    def from_raw(cls, deltas, upper, lower, knots=None) -> "MarginTable":
        """Apply the monotone, nonnegative and ordering adjustments."""
        d = np.asarray(deltas, dtype=float)
        if d.ndim != 1 or np.any(np.diff(d) <= 0) or (d.size and d[0] < 0):
            raise ConfigError("delta grid must be strictly increasing and nonnegative")
        u = np.clip(pava(upper), 0.0, None)
        l = np.clip(pava(lower), 0.0, None)
        l = np.minimum(l, u)
        zero = d == 0.0
        u[zero] = 0.0
        l[zero] = 0.0
        return cls(d, u, l, knots or {})

    def upper(self, delta):
        return np.interp(delta, np.r_[0.0, self.deltas], np.r_[0.0, self.h_upper_hat])

    def lower(self, delta):
        return np.interp(delta, np.r_[0.0, self.deltas], np.r_[0.0, self.h_lower_hat])

    def to_margin(self):
        """A table-family :class:`~.bounds.MarginSpec` over the same knots."""
        d, u, l = self.deltas, self.h_upper_hat, self.h_lower_hat
        if d.size and d[0] == 0.0:
            d, u, l = d[1:], u[1:], l[1:]
        return margin_table(d, u, l)

    @staticmethod
    def combine(tables: Sequence["MarginTable"]) -> "MarginTable":
        """Envelope over several tables on one grid: max upper, min lower."""
        if not tables:
            raise ValueError("nothing to combine")
        d = tables[0].deltas
        u = np.max([t.h_upper_hat for t in tables], axis=0)
        l = np.min([t.h_lower_hat for t in tables], axis=0)
        return MarginTable.from_raw(d, u, l)

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["delta", "h_upper", "h_lower"])
            for row in zip(self.deltas.tolist(), self.h_upper_hat.tolist(), self.h_lower_hat.tolist()):
                w.writerow([repr(v) for v in row])


def _default_offsets(alpha, count=12):
    room = min(alpha, 1.0 - alpha)
    return np.linspace(room / count, 0.98 * room, count)


def estimate_margins(X, y, alpha: float, delta_grid, learner, offsets=None) -> MarginTable:
    """Estimate ``h_upper`` and ``h_lower`` from quantile fits at ``alpha +/- p``.

    Parameters
    ----------
    X, y : array_like
        The cluster's contexts and demands.
    alpha : float
        Target quantile level.
    delta_grid : sequence of float
        Demand offsets at which the margins are tabulated.
    learner : object
        Learner config with ``fit(X, y, level)``.
    offsets : sequence of float, optional
        Probability offsets ``p`` to fit at; ``alpha +/- p`` must stay in
        ``(0, 1)``.  Defaults to 12 points up to 98% of the room available.
    """
    alpha = check_level(alpha)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    deltas = np.asarray(delta_grid, dtype=float)
    p = _default_offsets(alpha) if offsets is None else np.asarray(offsets, dtype=float)
    p = np.unique(p[p > 0])
    if np.any(alpha + p >= 1) or np.any(alpha - p <= 0):
        raise ConfigError("quantile level escapes (0, 1) for the requested offsets")
    n_levels = 2 * p.size + 1
    if X.shape[0] < 2 * n_levels:
        raise DataError(f"cluster of {X.shape[0]} points is too small for {n_levels} quantile fits")
    if not np.any(deltas > 0):
        return MarginTable.from_raw(deltas, np.zeros(deltas.size), np.zeros(deltas.size))

    center = learner.fit(X, y, alpha).predict(X)
    d_min, d_max = [], []
    for pi in p:
        up = learner.fit(X, y, alpha + pi).predict(X) - center
        down = center - learner.fit(X, y, alpha - pi).predict(X)
        d_min.append(float(np.min(np.minimum(up, down))))
        d_max.append(float(np.max(np.maximum(up, down))))
    d_min = np.asarray(d_min)
    d_max = np.asarray(d_max)

    def curve(offs):
        # offsets should grow with p; crossing fits (offset <= 0) are dropped
        keep = offs > 0
        if not keep.any():
            return np.zeros(deltas.size)
        o = pava(offs[keep])
        pk = p[keep]
        xs, ys = [0.0], [0.0]
        for oi, pi in zip(o.tolist(), pk.tolist()):
            if oi > xs[-1]:
                xs.append(oi)
                ys.append(pi)
            else:
                ys[-1] = max(ys[-1], pi)
        return np.interp(deltas, xs, ys)

    knots = {"p": p.tolist(), "offset_min": d_min.tolist(), "offset_max": d_max.tolist()}
    return MarginTable.from_raw(deltas, curve(d_min), curve(d_max), knots)


# ---------------------------------------------------------------------------
# gap


@dataclass
class KappaTable:
    """Pairwise gap samples and the fitted power law.

    ``samples`` holds parallel arrays ``n1``, ``xi`` and ``kappa``; ``eta``
    maps each training size to its scaling constant.
    """

    samples: dict
    eta: dict
    C: float
    nu: float
    xi: Optional[float] = None

    def gap(self) -> GapSpec:
        return GapSpec(self.C, self.nu)

    def kappa(self, n1, xi):
        return self.gap().kappa(n1, xi)

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["n1", "xi", "kappa_tilde"])
            for row in zip(self.samples["n1"].tolist(), self.samples["xi"].tolist(),
                           self.samples["kappa"].tolist()):
                w.writerow([repr(v) for v in row])

    def to_dict(self):
        return {"C": self.C, "nu": self.nu, "eta": {str(k): v for k, v in self.eta.items()},
                "xi": self.xi, "n_samples": int(self.samples["kappa"].size)}

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def fit_kappa(n1, xi, kappa) -> tuple:
    """Least-squares fit of ``log kappa = log C + (nu/2) log xi - (1/2) log n1``.

    Only entries with ``kappa > 0`` and ``xi > 0`` are used.  A negative
    exponent is clamped to 0 and ``C`` refitted.  Returns ``(C, nu)``.
    """
    n1 = np.asarray(n1, dtype=float)
    xi = np.asarray(xi, dtype=float)
    k = np.asarray(kappa, dtype=float)
    ok = (k > 0) & (xi > 0) & (n1 > 0) & np.isfinite(k)
    if not ok.any():
        return 0.0, 0.0
    t = np.log(k[ok]) + 0.5 * np.log(n1[ok])
    lx = np.log(xi[ok])
    if np.ptp(lx) > 0:
        A = np.column_stack([np.ones(lx.size), lx])
        (a, b), *_ = np.linalg.lstsq(A, t, rcond=None)
        nu = 2.0 * b
        if nu >= 0:
            return float(math.exp(a)), float(nu)
    return float(math.exp(np.mean(t))), 0.0


def _pairs(m, cap, rng: RngStream):
    total = m * (m - 1) // 2
    if total <= cap:
        i, j = np.triu_indices(m, 1)
        return i, j
    i = rng.integers(0, m, size=cap)
    j = rng.integers(0, m - 1, size=cap)
    j = np.where(j >= i, j + 1, j)
    return np.minimum(i, j), np.maximum(i, j)


def estimate_kappa(X, y, alpha: float, learner, rho_grid=(0.25, 0.5, 1.0), *,
                   test_fraction: float = 0.5, seed: int = 0, eta_override: Optional[float] = None,
                   max_pairs: int = 10_000, xi: Optional[float] = None) -> KappaTable:
    """Pairwise gap samples from one cluster and their power-law fit.

    The cluster is split (seeded) into a training part B1 and a test part
    B2.  For each ``rho`` a model is fitted on the first ``floor(rho |B1|)``
    rows of a seeded permutation of B1; a reference model is fitted on B2.
    For pairs ``(i, j)`` of B2 the sample is
    ``eta |e_i - e_j|`` where ``e`` is the excess loss over the reference and
    ``eta`` is the mean of ``|q(x_i)| / loss_i`` over B2 (zero losses skipped).
    """
    alpha = check_level(alpha)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    n = X.shape[0]
    n_test = int(round(n * test_fraction))
    n_train = n - n_test
    if n_test < 2 or n_train < 1:
        raise DataError(f"cluster of {n} points is too small to split for gap estimation")
    rng = RngStream(seed, 0)
    perm = rng.permutation(n)
    tr, te = perm[:n_train], perm[n_train:]
    Xte, yte = X[te], y[te]
    ref_loss = pinball_array(learner.fit(Xte, yte, alpha).predict(Xte), yte, alpha)
    sub = rng.permutation(n_train)
    ii, jj = _pairs(n_test, int(max_pairs), rng)
    dist = np.sqrt(np.sum((Xte[ii] - Xte[jj]) ** 2, axis=1))

    n1s, xis, ks = [], [], []
    etas = {}
    for rho in rho_grid:
        n1 = int(math.floor(n_train * float(rho)))
        if n1 < 1:
            raise DataError(f"rho={rho} leaves no training rows out of {n_train}")
        rows = tr[sub[:n1]]
        model = learner.fit(X[rows], y[rows], alpha)
        pred = model.predict(Xte)
        loss = pinball_array(pred, yte, alpha)
        pos = loss > 0
        if pos.any():
            eta = float(np.mean(np.abs(pred[pos]) / loss[pos]))
        elif eta_override is not None:
            eta = float(eta_override)
        else:
            raise DataError("every test loss is zero; cannot form eta without eta_override")
        etas[n1] = eta
        excess = loss - ref_loss
        ks.append(eta * np.abs(excess[ii] - excess[jj]))
        xis.append(dist)
        n1s.append(np.full(dist.size, float(n1)))
    samples = {"n1": np.concatenate(n1s), "xi": np.concatenate(xis), "kappa": np.concatenate(ks)}
    C, nu = fit_kappa(samples["n1"], samples["xi"], samples["kappa"])
    return KappaTable(samples, etas, C, nu, xi)


# ---------------------------------------------------------------------------
# clustering and density


def _diameter(P, cap=1500, rng=None):
    if P.shape[0] < 2:
        return 0.0
    if P.shape[0] > cap:
        P = P[(rng or RngStream(0)).choice(P.shape[0], cap)]
    return float(pdist(P).max())


def cluster_by_diameter(Z, xi: float, seed: int = 0, min_size: int = 1):
    """k-means labels with the cluster count whose median diameter is closest to ``xi``.

    Counts ``1, 2, 4, ...`` are tried up to ``len(Z) // min_size``.
    Returns ``(labels, k, median_diameter)``.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    n = Z.shape[0]
    kmax = max(1, n // max(int(min_size), 1))
    best = None
    k = 1
    while k <= kmax:
        if k == 1:
            labels = np.zeros(n, dtype=np.int64)
        else:
            gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(k,))))
            _, labels = kmeans2(Z, k, minit="++", rng=gen)
        sizes = np.bincount(labels, minlength=k)
        diam = [_diameter(Z[labels == c]) for c in range(k) if sizes[c] > 0]
        med = float(np.median(diam))
        score = abs(math.log(max(med, 1e-300) / xi))
        if best is None or score < best[0]:
            best = (score, labels, k, med)
        if med < xi:
            break
        k *= 2
    return best[1], best[2], best[3]


def fit_density_exponent(Z, n_queries: int = 200, seed: int = 0, n_grid: int = 24) -> tuple:
    """Fit ``count(xi) ~ a xi^iota`` from neighbour counts.

    Returns ``(iota, xi_min, xi_max)`` where ``xi_max`` is the diameter at
    which the fitted law reaches the full sample and ``xi_min`` the one at
    which it holds about ten points.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    n = Z.shape[0]
    index = NeighborIndex(Z)
    q = Z[RngStream(seed, 1).choice(n, min(n_queries, n))]
    span = _diameter(Z)
    if span <= 0:
        return 0.0, 1.0, 1.0
    nn = index.k_nearest_batch(q, min(2, n), return_distance=True)[1][:, -1]
    lo = max(2.0 * float(np.sqrt(np.median(nn))), span * 1e-3)
    grid = np.geomspace(lo, span, n_grid)
    counts = np.array([np.mean(np.diff(index.within_radius_batch(q, g)[0])) for g in grid])
    use = (counts > 1) & (counts < 0.5 * n)
    if use.sum() < 2:
        use = counts > 0
    b, a = np.polyfit(np.log(grid[use]), np.log(counts[use]), 1)
    iota = max(float(b), 1e-6)
    xi_max = float(math.exp((math.log(n) - a) / iota))
    xi_min = float(math.exp((math.log(min(10.0, n)) - a) / iota))
    return iota, min(xi_min, xi_max), xi_max


# ---------------------------------------------------------------------------
# iterative loop


@dataclass
class Algorithm3Result:
    xi: float
    margins: MarginTable
    kappa: KappaTable
    trace: list
    region: RegionModel
    xi_bounds: tuple

    def to_dict(self):
        return {
            "xi": self.xi,
            "trace": self.trace,
            "kappa": self.kappa.to_dict(),
            "region": {"rho": self.region.rho, "n": self.region.n, "iota": self.region.iota,
                       "xi_max": self.region.xi_max},
            "xi_bounds": list(self.xi_bounds),
        }


def algorithm3_loop(dataset: Dataset, alpha: float, init_xi: float, learner, *,
                    max_rounds: int = 5, stability_tol: float = 0.05, rho: float = 0.75,
                    delta_grid=None, offsets=None, rho_grid=(0.25, 0.5, 1.0),
                    xi_bounds: Optional[tuple] = None, n_xi: int = 40, max_clusters: int = 4,
                    seed: int = 0, standardize_features: bool = True,
                    max_pairs: int = 10_000) -> Algorithm3Result:
    """Alternate function estimation and diameter selection.

    Each round clusters the (standardized) contexts so the median cluster
    diameter is about the current ``xi``, estimates margins and the gap on
    the largest clusters, and picks a new diameter with
    :func:`~.bounds.two_approx_pool_search` over a geometric grid.  The loop
    stops when the diameter moves by at most ``stability_tol`` relative,
    after ``max_rounds`` rounds, or after two consecutive failed rounds (a
    failed round keeps the previous diameter).
    """
    alpha = check_level(alpha)
    if not init_xi > 0:
        raise ConfigError("init_xi must be positive")
    if int(max_rounds) < 1:
        raise ConfigError("max_rounds must be at least 1")
    data = standardize(dataset) if standardize_features else dataset
    Z, y = data.features, data.demand
    n = data.n

    iota, lo, hi = fit_density_exponent(Z, seed=seed)
    if xi_bounds is not None:
        lo, hi = map(float, xi_bounds)
        if not 0 < lo < hi:
            raise ConfigError("xi_bounds must satisfy 0 < low < high")
    grid = np.geomspace(lo, hi, int(n_xi))
    region = RegionModel(rho, n, iota, hi)
    if delta_grid is None:
        spread = float(np.std(y)) or 1.0
        delta_grid = np.linspace(0.0, 2.0 * spread, 41)
    delta_grid = np.asarray(delta_grid, dtype=float)
    n_off = len(_default_offsets(alpha)) if offsets is None else len(offsets)
    min_size = max(2 * (2 * n_off + 1), 8)

    xi = float(init_xi)
    trace = []
    failures = 0
    margins = kappa = None
    for rnd in range(int(max_rounds)):
        labels, k, med = cluster_by_diameter(Z, xi, seed=seed + rnd, min_size=min_size)
        sizes = np.bincount(labels)
        order = [c for c in np.argsort(-sizes, kind="stable") if sizes[c] >= min_size][:max_clusters]
        if not order:
            order = [int(np.argmax(sizes))]
        tables, kap = [], []
        for c in order:
            rows = np.nonzero(labels == c)[0]
            tables.append(estimate_margins(Z[rows], y[rows], alpha, delta_grid, learner, offsets))
            kap.append(estimate_kappa(Z[rows], y[rows], alpha, learner, rho_grid, seed=seed + rnd,
                                      max_pairs=max_pairs, xi=xi))
        margins = MarginTable.combine(tables)
        samples = {key: np.concatenate([t.samples[key] for t in kap]) for key in ("n1", "xi", "kappa")}
        C, nu = fit_kappa(samples["n1"], samples["xi"], samples["kappa"])
        etas = {}
        for t in kap:
            etas.update(t.eta)
        kappa = KappaTable(samples, etas, C, nu, xi)
        entry = {"round": rnd, "clusters": int(k), "median_diameter": med, "C": C, "nu": nu}
        try:
            res = two_approx_pool_search(grid, region, margins.to_margin(), kappa.gap())
        except NoCrossingError:
            failures += 1
            entry.update(xi=xi, delta=None, phi=None, ok=False)
            trace.append(entry)
            if failures >= 2:
                break
            continue
        failures = 0
        entry.update(xi=res.xi, delta=res.delta, phi=res.phi, ok=True)
        trace.append(entry)
        old, xi = xi, res.xi
        if abs(xi - old) <= stability_tol * old:
            break
    return Algorithm3Result(xi, margins, kappa, trace, region, (float(lo), float(hi)))
