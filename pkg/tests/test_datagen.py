from __future__ import annotations

import math

import mpmath
import numpy as np
import pytest

from conformal_newsvendor.core import read_csv
from conformal_newsvendor.datagen import (BLOCK, MA_THETA, GeneratorSpec, export_csv, f_ma, f_ml,
                                          generate, noiseless, true_quantile)
from conformal_newsvendor.errors import ConfigError
from conformal_newsvendor.normal import ndtri


def test_ml_hand_values():
    assert f_ml(np.full(10, 0.5)) == pytest.approx(4.40653, abs=5e-6)
    # term by term: e^0 + 0 + 0 + e^0 + 2(0 + 1 - 1)^2 + 0 + 0 + 0 = 2
    x = np.array([0.5, 0.5, 0.5, 0.5, 1, 0, 1 / 3, 0.2, 0, 0])
    assert f_ml(x) == pytest.approx(2.0, abs=1e-12)


def test_ml_term_by_term_at_midpoint():
    terms = [math.exp(0.0), 2 * 0.0 ** 2, abs(0.0), math.exp(-0.5), 2 * (0.5 + 1.5 - 1) ** 2,
             abs(0.5 - 0.2), 0.25, 0.25]
    assert f_ml(np.full(10, 0.5)) == pytest.approx(sum(terms), abs=1e-12)


def test_ml_and_ma_reject_wrong_dimension():
    with pytest.raises(ConfigError):
        f_ml(np.zeros(9))
    with pytest.raises(ConfigError):
        f_ma(np.zeros((3, 9)))
    with pytest.raises(ConfigError):
        GeneratorSpec("ml", d=9)
    with pytest.raises(ConfigError):
        GeneratorSpec("example3", d=2)
    with pytest.raises(ConfigError):
        GeneratorSpec("poisson")


def test_ma_values():
    assert f_ma(np.zeros(10)) == 0.5
    mpmath.mp.dps = 30
    e1 = np.eye(10)[0]
    assert f_ma(e1) == pytest.approx(float(mpmath.exp(2) / (1 + mpmath.exp(2))), abs=1e-15)
    x = np.eye(10)[5] * 8.0  # theta_6 = 5, so theta . x = 40
    assert abs(f_ma(x) - 1.0) < 1e-12
    assert f_ma(-x) >= 0 and np.isfinite(f_ma(-x))
    assert len(MA_THETA) == 10


def test_generate_is_deterministic_and_prefix_consistent():
    spec = GeneratorSpec("ma", seed=11)
    a, b = generate(spec, 500), generate(spec, 500)
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.demand, b.demand)
    longer = generate(spec, BLOCK + 10)
    np.testing.assert_array_equal(longer.features[:500], a.features)
    assert not np.array_equal(generate(GeneratorSpec("ma", seed=12), 500).demand, a.demand)


def test_covariates_in_range():
    for fam, (lo, hi) in [("ml", (0, 1)), ("example3", (-4, 4)), ("example2", (-1, 1))]:
        X = generate(GeneratorSpec(fam, seed=1), 2000).features
        assert X.min() >= lo and X.max() <= hi
        assert X.min() < lo + 0.05 * (hi - lo) and X.max() > hi - 0.05 * (hi - lo)


def test_linear_median_by_monte_carlo():
    spec = GeneratorSpec("linear", seed=3)
    n = 100_000
    d = generate(spec, n)
    frac = np.mean(d.demand <= d.features @ np.asarray(spec.theta))
    assert abs(frac - 0.5) <= 3 * math.sqrt(0.25 / n)


def test_true_quantile_coverage():
    spec = GeneratorSpec("example2", seed=4)
    d = generate(spec, 50_000)
    for a in (0.1, 0.75):
        frac = np.mean(d.demand <= true_quantile(spec, d.features, a))
        assert abs(frac - a) <= 3 * math.sqrt(a * (1 - a) / d.n)


def test_example3_branches():
    spec = GeneratorSpec("example3")
    assert noiseless(spec, np.array([2.0])) == 6.0
    assert noiseless(spec, np.array([-1.0])) == 6.0
    assert noiseless(spec, np.array([0.0])) == 2.0
    assert true_quantile(spec, np.array([2.0]), 0.5) == pytest.approx(6.0, abs=1e-15)
    assert true_quantile(spec, np.array([2.0]), 0.9) == pytest.approx(6.0 + ndtri(0.9))


def test_noise_moments():
    spec = GeneratorSpec("linear", seed=9)
    d = generate(spec, 1_000_000)
    eps = d.demand - noiseless(spec, d.features)
    n = eps.size
    assert abs(eps.mean()) <= 3 / math.sqrt(n)
    assert abs(eps.var() - 1) <= 3 * math.sqrt(2 / n)


def test_export_csv_round_trip(tmp_path):
    spec = GeneratorSpec("example2", seed=2)
    path = tmp_path / "d.csv"
    data = export_csv(spec, 123, path)
    back = read_csv(path)
    np.testing.assert_array_equal(back.features, data.features)
    np.testing.assert_array_equal(back.demand, data.demand)
    assert spec.to_dict()["theta"] == [1.0, -2.0, 1.5]
