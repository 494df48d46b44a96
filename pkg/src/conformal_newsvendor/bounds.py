"""Coverage-gap calculator for locally pooled conformal quantiles.

Given margin functions ``h_upper``/``h_lower`` (how fast conditional
probability accumulates around the true quantile), a gap function
``kappa(n1, xi)`` (how much model bias can differ across a ball of diameter
``xi`` after training on ``n1`` points) and a model of how many points a
ball holds, this module evaluates

    phi(delta, B) = h_upper(delta + kappa(n1(B), xi(B))) + exp(-2 n2(B) h_lower(delta)^2)

and provides the balancing margin ``delta_tilde`` (found by bisection), a
grid search over diameters that is within a factor two of the optimum, the
closed-form stationarity condition for linear margins and power-law gaps,
and the width ``z`` of a quantile confidence interval.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, IntervalEscapesError, NoCrossingError, NumericalError
from .loss import check_level
from .normal import ndtr, ndtri

__all__ = [
    "MarginSpec",
    "GapSpec",
    "RegionModel",
    "margin_uniform",
    "margin_gaussian",
    "margin_exponential",
    "margin_linear",
    "margin_table",
    "make_margin",
    "MARGIN_FAMILIES",
    "phi",
    "phi_terms",
    "solve_tilde_delta",
    "PoolSearchResult",
    "two_approx_pool_search",
    "DiameterResult",
    "optimal_diameter_prop1",
    "prop1_constants",
    "prop1_lhs",
    "theorem4_z",
    "ConfidenceInterval",
    "CalibratedFactory",
    "confidence_interval",
    "BoundsReport",
]

MARGIN_FAMILIES = ("uniform", "gaussian", "exponential", "linear", "table")

_DELTA_CAP = 1e12


def _check_gammas(gamma_low, gamma_high):
    gamma_low, gamma_high = float(gamma_low), float(gamma_high)
    if not (0 < gamma_low <= gamma_high < math.inf):
        raise ConfigError(f"need 0 < gamma_low <= gamma_high < inf, got ({gamma_low}, {gamma_high})")
    return gamma_low, gamma_high


@dataclass(frozen=True)
class MarginSpec:
    """Upper and lower margin functions of one of the supported families.

    ``params`` holds the family parameters; for ``table`` it holds knot
    arrays ``deltas``, ``upper`` and ``lower`` starting at ``(0, 0)``.
    Both functions accept scalars or arrays.
    """

    family: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in MARGIN_FAMILIES:
            raise ConfigError(f"unknown margin family {self.family!r}; valid families: "
                              + ", ".join(MARGIN_FAMILIES))

    def _eval(self, delta, which):
        d = np.asarray(delta, dtype=float)
        p = self.params
        f = self.family
        if f == "uniform":
            g = p["gamma_low"] if which == "upper" else p["gamma_high"]
            out = d / (2.0 * g)
        elif f == "linear":
            out = (p["c1"] if which == "upper" else p["c2"]) * d
        elif f == "gaussian":
            g = p["gamma_low"] if which == "upper" else p["gamma_high"]
            za = ndtri(p["alpha"])
            out = np.asarray(ndtr(za + d / g)) - p["alpha"]
        elif f == "exponential":
            g = p["gamma_high"] if which == "upper" else p["gamma_low"]
            out = (1.0 - p["alpha"]) * -np.expm1(-g * d)
        else:
            out = np.interp(d, p["deltas"], p[which])
        return float(out) if np.ndim(out) == 0 else out

    def upper(self, delta):
        """``h_upper(delta)``."""
        return self._eval(delta, "upper")

    def lower(self, delta):
        """``h_lower(delta)``."""
        return self._eval(delta, "lower")

    def lower_inverse(self, p: float, tol: float = 1e-10) -> float:
        """Smallest ``delta >= 0`` with ``h_lower(delta) >= p``, by bisection."""
        p = float(p)
        if p <= 0:
            return 0.0
        hi = 1.0
        while self.lower(hi) < p:
            hi *= 2.0
            if hi > _DELTA_CAP:
                raise NumericalError(f"h_lower never reaches {p:.6g}; its supremum is too small")
        lo = 0.0
        while hi - lo > tol * max(1.0, hi):
            mid = 0.5 * (lo + hi)
            if mid <= lo or mid >= hi:
                break
            if self.lower(mid) >= p:
                hi = mid
            else:
                lo = mid
        return hi

    def to_dict(self):
        params = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.params.items()}
        return {"family": self.family, **params}


def margin_uniform(gamma_low, gamma_high) -> MarginSpec:
    """Margins for demand uniform on ``[-g, g]`` with ``g`` in ``[gamma_low, gamma_high]``.

    ``h_upper(d) = d / (2 gamma_low)`` and ``h_lower(d) = d / (2 gamma_high)``.
    """
    gl, gh = _check_gammas(gamma_low, gamma_high)
    return MarginSpec("uniform", {"gamma_low": gl, "gamma_high": gh})


def margin_gaussian(gamma_low, gamma_high, alpha) -> MarginSpec:
    """Margins for Gaussian demand with standard deviation in ``[gamma_low, gamma_high]``.

    ``h(d) = Phi(Phi^{-1}(alpha) + d / gamma) - alpha``, with ``gamma_low``
    for the upper function and ``gamma_high`` for the lower one.
    """
    gl, gh = _check_gammas(gamma_low, gamma_high)
    return MarginSpec("gaussian", {"gamma_low": gl, "gamma_high": gh, "alpha": check_level(alpha)})


def margin_exponential(gamma_low, gamma_high, alpha) -> MarginSpec:
    """Margins for exponential demand with rate in ``[gamma_low, gamma_high]``.

    ``h(d) = (1 - alpha)(1 - exp(-gamma d))``, with ``gamma_high`` for the
    upper function and ``gamma_low`` for the lower one.
    """
    gl, gh = _check_gammas(gamma_low, gamma_high)
    return MarginSpec("exponential", {"gamma_low": gl, "gamma_high": gh, "alpha": check_level(alpha)})


def margin_linear(c1, c2) -> MarginSpec:
    """``h_upper(d) = c1 d`` and ``h_lower(d) = c2 d`` with ``c1 >= c2 > 0``."""
    c1, c2 = float(c1), float(c2)
    if not (c1 >= c2 > 0):
        raise ConfigError(f"need c1 >= c2 > 0, got ({c1}, {c2})")
    return MarginSpec("linear", {"c1": c1, "c2": c2})


def margin_table(deltas, upper, lower) -> MarginSpec:
    """Piecewise-linear margins through ``(0, 0)`` and the given knots.

    Beyond the last knot both functions stay at their final value.
    """
    d = np.asarray(deltas, dtype=float)
    u = np.asarray(upper, dtype=float)
    l = np.asarray(lower, dtype=float)
    if not (d.shape == u.shape == l.shape) or d.ndim != 1:
        raise ConfigError("margin table arrays must be 1-d and of equal length")
    if d.size == 0 or d[0] != 0.0:
        d, u, l = np.r_[0.0, d], np.r_[0.0, u], np.r_[0.0, l]
    if np.any(np.diff(d) <= 0) or d[0] < 0:
        raise ConfigError("margin table deltas must be strictly increasing and nonnegative")
    if u[0] != 0 or l[0] != 0:
        raise ConfigError("margin table must pass through (0, 0)")
    return MarginSpec("table", {"deltas": d, "upper": u, "lower": l})


def make_margin(family: str, **params) -> MarginSpec:
    """Build a margin spec by family name (used by configuration files)."""
    makers = {
        "uniform": margin_uniform,
        "gaussian": margin_gaussian,
        "exponential": margin_exponential,
        "linear": margin_linear,
        "table": margin_table,
    }
    if family not in makers:
        raise ConfigError(f"unknown margin family {family!r}; valid families: " + ", ".join(MARGIN_FAMILIES))
    try:
        return makers[family](**params)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for margin family {family!r}: {exc}") from None


@dataclass(frozen=True)
class GapSpec:
    """Power-law gap function ``kappa(n1, xi) = C sqrt(xi^nu / n1)``."""

    C: float = 1.0
    nu: float = 0.0

    def __post_init__(self):
        if not (self.C >= 0 and self.nu >= 0):
            raise ConfigError(f"gap needs C >= 0 and nu >= 0, got C={self.C}, nu={self.nu}")

    def kappa(self, n1, xi):
        n1 = np.asarray(n1, dtype=float)
        xi = np.asarray(xi, dtype=float)
        with np.errstate(divide="ignore"):
            out = self.C * np.sqrt(np.power(xi, self.nu) / n1)
        return float(out) if np.ndim(out) == 0 else out

    __call__ = kappa


@dataclass(frozen=True)
class RegionModel:
    """Sample counts of a ball of diameter ``xi``.

    ``n(xi) = n (xi / xi_max)^iota``, split into a training share ``rho``
    and a calibration share ``1 - rho``.  Diameters above ``xi_max``
    extrapolate the same power law.
    """

    rho: float
    n: float
    iota: float
    xi_max: float = 1.0

    def __post_init__(self):
        if not 0 < self.rho < 1:
            raise ConfigError("rho must lie in (0, 1)")
        if not self.n >= 1:
            raise ConfigError("n must be at least 1")
        if not self.iota >= 0:
            raise ConfigError("iota must be nonnegative")
        if not self.xi_max > 0:
            raise ConfigError("xi_max must be positive")

    def count(self, xi):
        out = self.n * np.power(np.asarray(xi, dtype=float) / self.xi_max, self.iota)
        return float(out) if np.ndim(out) == 0 else out

    def n1(self, xi):
        return self.rho * self.count(xi)

    def n2(self, xi):
        return (1.0 - self.rho) * self.count(xi)


def phi_terms(delta, n1, n2, xi, margin: MarginSpec, gap) -> tuple:
    """The two summands of ``phi`` for explicit sample counts."""
    k = gap.kappa(n1, xi)
    a = margin.upper(np.asarray(delta, dtype=float) + k)
    b = np.exp(-2.0 * np.asarray(n2, dtype=float) * np.asarray(margin.lower(delta)) ** 2)
    return a, (float(b) if np.ndim(b) == 0 else b)


def phi(delta, xi, region: RegionModel, margin: MarginSpec, gap) -> float:
    """Coverage-gap bound at margin ``delta`` for the ball of diameter ``xi``."""
    a, b = phi_terms(delta, region.n1(xi), region.n2(xi), xi, margin, gap)
    return a + b


def _g(delta, n2, kappa, margin):
    return margin.upper(delta + kappa) - math.exp(-2.0 * n2 * margin.lower(delta) ** 2)


def solve_tilde_delta(xi, region: RegionModel, margin: MarginSpec, gap, tol: float = 1e-10,
                      *, n1=None, n2=None) -> float:
    """Margin level at which both terms of ``phi`` are equal.

    Solves ``h_upper(d + kappa) = exp(-2 n2 h_lower(d)^2)`` by bisection on
    the increasing difference of the two sides.  The bracket starts at
    ``[0, 1]`` and doubles until the difference changes sign.

    Raises
    ------
    NoCrossingError
        If the difference is already nonnegative at 0 (``h_upper(kappa) >= 1``)
        or never turns positive.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    n1 = region.n1(xi) if n1 is None else n1
    n2 = region.n2(xi) if n2 is None else n2
    kappa = gap.kappa(n1, xi)
    if not math.isfinite(kappa):
        raise NoCrossingError(math.nan, math.nan)
    g0 = _g(0.0, n2, kappa, margin)
    if g0 >= 0:
        if g0 == 0:
            return 0.0
        raise NoCrossingError(g0, g0)
    lo, hi = 0.0, 1.0
    ghi = _g(hi, n2, kappa, margin)
    while ghi <= 0:
        lo = hi
        hi *= 2.0
        if hi > _DELTA_CAP:
            raise NoCrossingError(g0, ghi)
        ghi = _g(hi, n2, kappa, margin)
    mid = 0.5 * (lo + hi)
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        gm = _g(mid, n2, kappa, margin)
        if gm > 0:
            hi = mid
        elif gm < 0:
            lo = mid
        else:
            return mid
        if abs(gm) <= tol and hi - lo <= tol:
            break
        if not lo < 0.5 * (lo + hi) < hi:
            break
    return mid


@dataclass
class PoolSearchResult:
    xi: float
    delta: float
    phi: float
    table: list

    def to_dict(self):
        return asdict(self)


def two_approx_pool_search(xi_candidates: Sequence[float], region: RegionModel,
                           margin: MarginSpec, gap, tol: float = 1e-10) -> PoolSearchResult:
    """Pick the diameter whose balanced margin gives the smallest ``phi``.

    For every candidate the balancing ``delta_tilde`` is found by bisection
    and ``phi`` is evaluated there; candidates without a crossing are
    skipped.  The result is within a factor two of the joint minimum of
    ``phi`` over margin and diameter.  Ties keep the larger diameter.
    """
    xs = [float(x) for x in xi_candidates]
    if not xs:
        raise ConfigError("need at least one diameter candidate")
    table = []
    best = None
    for xi in xs:
        try:
            d = solve_tilde_delta(xi, region, margin, gap, tol)
        except NoCrossingError:
            table.append({"xi": xi, "delta": None, "phi": None, "ok": False})
            continue
        p = phi(d, xi, region, margin, gap)
        table.append({"xi": xi, "delta": d, "phi": p, "ok": True})
        if best is None or p < best[2] or (p == best[2] and xi > best[0]):
            best = (xi, d, p)
    if best is None:
        raise NoCrossingError(math.nan, math.nan)
    return PoolSearchResult(best[0], best[1], best[2], table)


@dataclass
class DiameterResult:
    """Outcome of the closed-form diameter condition.

    ``status`` is ``"full_region"`` (pooling everything is optimal),
    ``"root"`` (``xi`` is the selected root of the stationarity equation,
    all roots are listed) or ``"no_stationary_point"`` (the equation has no
    root; ``l_max`` and ``xi_peak`` describe the peak of its left side).
    """

    status: str
    xi: Optional[float]
    roots: list
    c1_prime: Optional[float]
    c2_prime: Optional[float]
    l_max: Optional[float] = None
    xi_peak: Optional[float] = None
    phi_at_roots: list = field(default_factory=list)

    @property
    def full_region(self) -> bool:
        return self.status == "full_region"

    def to_dict(self):
        return asdict(self)


def prop1_constants(c1, c2, rho, iota, nu) -> tuple:
    """``(c1', c2')`` of the stationarity equation."""
    c1p = c1 * iota * math.sqrt(rho) / (4.0 * (nu - iota) * (1.0 - rho) * c2 ** 2)
    c2p = 2.0 * c2 ** 2 * ((nu - iota) / iota) ** 2 * (1.0 - rho) / rho
    return c1p, c2p


def prop1_lhs(xi, n, iota, nu, c2p):
    """``sqrt(n xi^(nu + iota)) exp(-c2' xi^nu)``."""
    xi = np.asarray(xi, dtype=float)
    out = np.sqrt(n * np.power(xi, nu + iota)) * np.exp(-c2p * np.power(xi, nu))
    return float(out) if np.ndim(out) == 0 else out


def optimal_diameter_prop1(c1, c2, rho, n, iota, nu, tol: float = 1e-10) -> DiameterResult:
    """Optimal pooling diameter for linear margins and a power-law gap.

    Assumes ``h_upper = c1 d``, ``h_lower = c2 d``, ball counts
    ``n1 = rho n xi^iota``, ``n2 = (1 - rho) n xi^iota`` and
    ``kappa = sqrt(xi^nu / n1)``.  When ``nu <= iota`` pooling the whole
    region is optimal.  Otherwise the optimum solves ``L(xi) = c1'`` with
    ``L(xi) = sqrt(n xi^(nu+iota)) exp(-c2' xi^nu)``.  ``L`` rises to a
    single peak and then falls, so each side of the peak is bisected
    separately; when two roots exist the one with smaller ``phi`` is
    selected.
    """
    c1, c2, rho, n, iota, nu = map(float, (c1, c2, rho, n, iota, nu))
    if not (c1 >= c2 > 0):
        raise ConfigError("need c1 >= c2 > 0")
    if not 0 < rho < 1:
        raise ConfigError("rho must lie in (0, 1)")
    if not n >= 1:
        raise ConfigError("n must be at least 1")
    if not (iota >= 0 and nu >= 0):
        raise ConfigError("iota and nu must be nonnegative")
    if nu <= iota:
        return DiameterResult("full_region", None, [], None, None)
    if iota == 0:
        raise ConfigError("the stationarity condition needs iota > 0")
    c1p, c2p = prop1_constants(c1, c2, rho, iota, nu)

    def logL(x):
        return 0.5 * (math.log(n) + (nu + iota) * math.log(x)) - c2p * x ** nu

    target = math.log(c1p)
    xi_peak = ((nu + iota) / (2.0 * c2p * nu)) ** (1.0 / nu)
    l_max = math.exp(logL(xi_peak))
    if logL(xi_peak) < target:
        return DiameterResult("no_stationary_point", None, [], c1p, c2p, l_max, xi_peak)

    def bisect(a, b, rising):
        # root of logL - target on [a, b]; logL increasing on the left branch
        for _ in range(2000):
            m = 0.5 * (a + b)
            if not a < m < b:
                break
            above = logL(m) >= target
            if above == rising:
                b = m
            else:
                a = m
        la, lb = abs(math.exp(logL(a)) - c1p), abs(math.exp(logL(b)) - c1p)
        return a if la <= lb else b

    roots = []
    lo = xi_peak
    while logL(lo) >= target:
        lo *= 0.5
        if lo < 1e-300:
            break
    if logL(lo) < target:
        roots.append(bisect(lo, xi_peak, True))
    hi = xi_peak
    while logL(hi) >= target:
        hi *= 2.0
    right = bisect(xi_peak, hi, False)
    if not roots or abs(right - roots[0]) > tol * max(1.0, right):
        roots.append(right)

    region = RegionModel(rho, n, iota)
    margin = margin_linear(c1, c2)
    gap = GapSpec(1.0, nu)
    phis = []
    for r in roots:
        try:
            d = solve_tilde_delta(r, region, margin, gap, tol)
            phis.append(phi(d, r, region, margin, gap))
        except NoCrossingError:
            phis.append(math.inf)
    best = int(np.argmin(phis))
    return DiameterResult("root", roots[best], roots, c1p, c2p, l_max, xi_peak, phis)


def theorem4_z(delta_conf: float, n2: float, margin: MarginSpec, kappa: float = 0.0) -> float:
    """Half-width in probability of the quantile confidence interval.

    ``z = h_upper(h_lower^{-1}(sqrt(log(1/(2 delta)) / (2 n2))) + kappa)``.
    """
    if not 0 < delta_conf < 1:
        raise ConfigError("delta_conf must lie in (0, 1)")
    if not n2 > 0:
        raise ConfigError("n2 must be positive")
    p = math.sqrt(max(math.log(1.0 / (2.0 * delta_conf)), 0.0) / (2.0 * n2))
    return float(margin.upper(margin.lower_inverse(p) + kappa))


@dataclass
class ConfidenceInterval:
    lo: float
    hi: float
    z: float


class CalibratedFactory:
    """Fits and calibrates models at arbitrary quantile levels, with a cache.

    Parameters
    ----------
    train, calib : Dataset
        Training and calibration parts.
    learner : object
        Learner config with ``fit(X, y, alpha)``.
    pooling : PoolingSpec, optional
        Pooling rule for the calibrated models.
    """

    def __init__(self, train, calib, learner, pooling=None, standardize: bool = True):
        self.train = train
        self.calib = calib
        self.learner = learner
        self.pooling = pooling
        self.standardize = standardize
        self._cache = {}
        self.fits = 0

    def __call__(self, level: float):
        key = round(float(level), 15)
        if key not in self._cache:
            from .conformal import cqpc_fit

            self._cache[key] = cqpc_fit(self.train, self.calib, level, self.learner,
                                        self.pooling, self.standardize)
            self.fits += 1
        return self._cache[key]


def confidence_interval(factory: Callable, x, alpha: float, delta_conf: float,
                        margin: MarginSpec, gap, *, n1=None, n2=None, xi: float = math.inf,
                        region: Optional[RegionModel] = None) -> ConfidenceInterval:
    """Interval ``[q^c_{alpha-z}(x), q^c_{alpha+z}(x)]`` for the true quantile at ``x``.

    ``factory(level)`` must return a calibrated model at that level.  Sample
    counts come from ``region`` at ``xi`` unless given explicitly.

    Raises
    ------
    IntervalEscapesError
        When ``alpha - z`` or ``alpha + z`` leaves ``(0, 1)``.
    """
    alpha = check_level(alpha)
    if region is not None:
        n1 = region.n1(xi) if n1 is None else n1
        n2 = region.n2(xi) if n2 is None else n2
    if n2 is None:
        raise ConfigError("confidence_interval needs n2 (or a region model)")
    kappa = gap.kappa(n1, xi) if n1 is not None else 0.0
    try:
        z = theorem4_z(delta_conf, n2, margin, kappa)
    except NumericalError:
        raise IntervalEscapesError(math.inf, alpha) from None
    if not z < min(alpha, 1.0 - alpha):
        raise IntervalEscapesError(z, alpha)
    lo = factory(alpha - z).predict(x)
    hi = factory(alpha + z).predict(x)
    return ConfidenceInterval(lo, hi, z)


@dataclass
class BoundsReport:
    """JSON-serialisable summary of a bounds computation."""

    xi: Optional[float] = None
    delta: Optional[float] = None
    phi: Optional[float] = None
    z: Optional[float] = None
    lo: Optional[float] = None
    hi: Optional[float] = None
    roots: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        extra = d.pop("extra")
        d.update(extra)
        return d

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)
