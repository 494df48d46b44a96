from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conformal_newsvendor.core import Dataset
from conformal_newsvendor.datagen import GeneratorSpec, generate
from conformal_newsvendor.errors import ConfigError, DataError
from conformal_newsvendor.estimation import (MarginTable, algorithm3_loop, cluster_by_diameter,
                                             estimate_kappa, estimate_margins, fit_density_exponent,
                                             fit_kappa, pava)
from conformal_newsvendor.regressors import LinearQRConfig


def brute_isotonic(y):
    # minimum-lower-set formula for the isotonic regression
    y = np.asarray(y, dtype=float)
    n = y.size
    out = np.empty(n)
    for i in range(n):
        out[i] = max(min(y[a:b + 1].mean() for b in range(i, n)) for a in range(i + 1))
    return out


@settings(max_examples=80, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=12))
def test_pava_matches_brute_force(values):
    np.testing.assert_allclose(pava(values), brute_isotonic(values), atol=1e-9)


def test_pava_weights_and_crafted_violation():
    np.testing.assert_allclose(pava([3.0, 1.0], [1.0, 3.0]), [1.5, 1.5])
    t = MarginTable.from_raw([0.1, 0.2, 0.3], [0.3, 0.1, 0.4], [0.2, 0.3, 0.05])
    assert np.all(np.diff(t.h_upper_hat) >= 0) and np.all(np.diff(t.h_lower_hat) >= 0)
    assert np.all(t.h_lower_hat <= t.h_upper_hat)
    assert t.upper(0.0) == 0.0 and t.lower(0.0) == 0.0


def _uniform_noise(n, seed, hetero=False):
    rng = np.random.default_rng(seed)
    X = rng.uniform(0, 1, (n, 1))
    scale = 1.0 + X[:, 0] if hetero else 1.0
    return X, 3 * X[:, 0] + rng.uniform(-1, 1, n) * scale


def test_margins_zero_grid_gives_zeros():
    X, y = _uniform_noise(200, 0)
    t = estimate_margins(X, y, 0.5, [0.0], LinearQRConfig())
    assert t.h_upper_hat.tolist() == [0.0] and t.h_lower_hat.tolist() == [0.0]


def test_margins_recover_uniform_line():
    X, y = _uniform_noise(5000, 1)
    deltas = [0.05, 0.1, 0.2]
    t = estimate_margins(X, y, 0.5, deltas, LinearQRConfig())
    np.testing.assert_allclose(t.h_upper_hat, np.array(deltas) / 2, atol=0.05)
    np.testing.assert_allclose(t.h_lower_hat, np.array(deltas) / 2, atol=0.05)
    m = t.to_margin()
    assert m.upper(0.1) == pytest.approx(t.h_upper_hat[1])


def test_margins_errors():
    X, y = _uniform_noise(20, 2)
    with pytest.raises(ConfigError):
        estimate_margins(X, y, 0.5, [0.1], LinearQRConfig(), offsets=[0.6])
    with pytest.raises(DataError):
        estimate_margins(X, y, 0.5, [0.1], LinearQRConfig())


def test_fit_kappa_recovers_planted_law():
    rng = np.random.default_rng(7)
    n1 = rng.choice([50.0, 100.0, 400.0], 3000)
    xi = rng.uniform(0.01, 3.0, 3000)
    k = 2.0 * np.sqrt(xi / n1) * (1 + 0.01 * rng.standard_normal(3000))
    C, nu = fit_kappa(n1, xi, k)
    assert abs(C - 2.0) <= 0.1 and abs(nu - 1.0) <= 0.1


def test_fit_kappa_ignores_degenerate_entries():
    n1 = np.array([10.0, 10.0, 10.0, 10.0])
    xi = np.array([0.0, 1.0, 2.0, 4.0])
    k = np.array([5.0, 1.0 / np.sqrt(10), np.sqrt(2 / 10), 0.0])
    C, nu = fit_kappa(n1, xi, k)
    assert C == pytest.approx(1.0) and nu == pytest.approx(1.0)
    assert fit_kappa([1.0], [0.0], [1.0]) == (0.0, 0.0)


def test_kappa_keeps_zero_distance_pairs():
    X, y = _uniform_noise(60, 3)
    X = np.repeat(X[:30], 2, axis=0)
    kt = estimate_kappa(X, y, 0.5, LinearQRConfig(), seed=1)
    assert np.any(kt.samples["xi"] == 0)
    assert np.all(kt.samples["kappa"] >= 0)
    assert kt.C >= 0 and kt.nu >= 0
    assert all(np.isfinite(v) and v > 0 for v in kt.eta.values())


def test_kappa_grows_with_distance_on_piecewise_model():
    d = generate(GeneratorSpec("example3", seed=3), 1200)
    kt = estimate_kappa(d.features, d.demand, 0.5, LinearQRConfig(), seed=0)
    xi, k = kt.samples["xi"], kt.samples["kappa"]
    q1, q3 = np.quantile(xi, [0.25, 0.75])
    assert k[xi >= q3].mean() > k[xi <= q1].mean()


def test_kappa_shrinks_with_more_training_data():
    d = generate(GeneratorSpec("linear", seed=5), 4000)

    def at_median(n):
        kt = estimate_kappa(d.features[:n], d.demand[:n], 0.5, LinearQRConfig(), rho_grid=(1.0,), seed=0)
        return kt.kappa(np.median(kt.samples["n1"]), np.median(kt.samples["xi"]))

    assert at_median(2000) < at_median(500)


def test_kappa_errors():
    X, y = _uniform_noise(3, 4)
    with pytest.raises(DataError):
        estimate_kappa(X, y, 0.5, LinearQRConfig())


def test_cluster_and_density_helpers():
    rng = np.random.default_rng(0)
    Z = rng.uniform(0, 1, (600, 2))
    labels, k, med = cluster_by_diameter(Z, 0.5, seed=1)
    assert labels.shape == (600,) and k >= 2 and med > 0
    iota, lo, hi = fit_density_exponent(Z)
    assert 1.5 < iota < 2.5 and 0 < lo < hi


def test_algorithm3_single_round():
    d = generate(GeneratorSpec("example3", seed=1), 800)
    r = algorithm3_loop(d, 0.5, 1.0, LinearQRConfig(), max_rounds=1)
    assert len(r.trace) == 1
    assert r.margins is not None and r.kappa is not None


def test_algorithm3_deterministic_and_bounded():
    d = generate(GeneratorSpec("example3", seed=2), 1000)
    a = algorithm3_loop(d, 0.5, 0.5, LinearQRConfig(), max_rounds=3, seed=4)
    b = algorithm3_loop(d, 0.5, 0.5, LinearQRConfig(), max_rounds=3, seed=4)
    assert a.trace == b.trace
    lo, hi = a.xi_bounds
    assert all(lo - 1e-12 <= e["xi"] <= hi + 1e-12 for e in a.trace)


def test_algorithm3_well_specified_pools_everything():
    d = generate(GeneratorSpec("linear", seed=1), 1500)
    r = algorithm3_loop(d, 0.5, 1.0, LinearQRConfig(), max_rounds=3)
    assert r.xi == pytest.approx(r.xi_bounds[1])


def test_algorithm3_validates_inputs():
    d = Dataset(np.zeros((10, 1)), np.zeros(10))
    with pytest.raises(ConfigError):
        algorithm3_loop(d, 0.5, 0.0, LinearQRConfig())
    with pytest.raises(ConfigError):
        algorithm3_loop(d, 0.5, 1.0, LinearQRConfig(), max_rounds=0)
