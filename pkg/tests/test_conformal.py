from __future__ import annotations

import math
from decimal import Decimal

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conformal_newsvendor.conformal import (calibrate, conformal_quantile, coverage_bounds, cqpc_fit,
                                            gtlc_select, predict_calibrated, reference_interval)
from conformal_newsvendor.core import Dataset
from conformal_newsvendor.datagen import GeneratorSpec, generate
from conformal_newsvendor.errors import ConfigError, EmptyPoolError, InsufficientDataError
from conformal_newsvendor.loss import empirical_pinball
from conformal_newsvendor.neighbors import PoolingSpec
from conformal_newsvendor.regressors import FixedModel, LinearQRConfig


def sort_oracle(scores, alpha):
    s = sorted(float(v) for v in scores)
    k = math.ceil(Decimal(repr(alpha)) * (len(s) + 1))
    if k > len(s):
        return s[-1], True
    if k < 1:
        return s[0], True
    return s[k - 1], False


def test_conformal_quantile_examples():
    assert conformal_quantile([-3, -1, 2, 5], 0.5) == (2.0, False)
    assert conformal_quantile([0.5], 0.5) == (0.5, False)
    assert conformal_quantile([1, 2, 3, 4], 0.99) == (4.0, True)
    with pytest.raises(ValueError):
        conformal_quantile([], 0.5)


def test_conformal_quantile_exact_rank_boundary():
    # alpha (n+1) is an integer here; a float product would round up past it
    assert conformal_quantile(np.arange(9.0), 0.7)[0] == 6.0
    assert conformal_quantile(np.arange(19.0), 0.05)[0] == 0.0


@settings(max_examples=300, deadline=None)
@given(scores=st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=40),
       alpha=st.floats(0.001, 0.999))
def test_conformal_quantile_matches_sort_oracle(scores, alpha):
    v, c = conformal_quantile(scores, alpha)
    assert (v, c) == sort_oracle(scores, alpha)


@settings(max_examples=100, deadline=None)
@given(scores=st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=30),
       a=st.floats(0.01, 0.99), b=st.floats(0.01, 0.99))
def test_conformal_quantile_monotone_in_alpha(scores, a, b):
    lo, hi = min(a, b), max(a, b)
    assert conformal_quantile(scores, lo)[0] <= conformal_quantile(scores, hi)[0]


def _linear(n, seed, d=2):
    return generate(GeneratorSpec("linear", d=d, seed=seed), n)


def test_single_calibration_point():
    train, calib = _linear(50, 1), _linear(1, 2)
    for alpha in (0.2, 0.5):
        m = cqpc_fit(train, calib, alpha, LinearQRConfig())
        s = calib.demand[0] - m.base.predict(calib.features)[0]
        assert m.corrections(np.zeros((1, 2)))[0][0] == pytest.approx(s)


def test_constant_bias_cancels_exactly():
    data = _linear(300, 3)
    calib, query = data.subset(range(200)), data.features[200:]
    fn = lambda X: X @ np.array([1.0, -2.0])  # noqa: E731
    for b in (-10.0, 3.7):
        a = calibrate(FixedModel(fn, 0.4, 2), calib, 0.4).predict(query)
        c = calibrate(FixedModel(fn, 0.4, 2, b), calib, 0.4).predict(query)
        assert np.max(np.abs(a - c)) <= 1e-12


def test_all_pooling_is_a_constant_shift():
    train, calib = _linear(200, 4), _linear(100, 5)
    m = cqpc_fit(train, calib, 0.7, LinearQRConfig())
    X = _linear(30, 6).features
    corr, _ = m.corrections(X)
    assert np.ptp(corr) == 0
    assert np.allclose(m.predict(X) - m.base.predict(X), corr[0], rtol=0, atol=1e-12)


def test_count_n2_equals_all():
    train, calib = _linear(200, 7), _linear(60, 8)
    m = cqpc_fit(train, calib, 0.3, LinearQRConfig())
    X = _linear(25, 9).features
    assert np.array_equal(m.predict(X), m.with_pooling(PoolingSpec.count(60)).predict(X))


def test_pooling_errors():
    train, calib = _linear(100, 10), _linear(20, 11)
    m = cqpc_fit(train, calib, 0.5, LinearQRConfig(), PoolingSpec.radius(1e-6))
    with pytest.raises(EmptyPoolError, match="1e-06"):
        predict_calibrated(m, [50.0, 50.0])
    with pytest.raises(InsufficientDataError):
        m.with_pooling(PoolingSpec.count(21)).predict([0.0, 0.0])


def test_predict_single_vector_returns_float():
    m = cqpc_fit(_linear(100, 12), _linear(40, 13), 0.5, LinearQRConfig(), PoolingSpec.radius(10.0))
    assert isinstance(predict_calibrated(m, [0.5, 0.5]), float)


def test_local_pooling_beats_global_on_piecewise_model():
    better = 0
    for seed in range(20):
        d = generate(GeneratorSpec("example3", seed=seed), 1200)
        train, calib, test = d.subset(range(600)), d.subset(range(600, 1000)), d.subset(range(1000, 1200))
        m = cqpc_fit(train, calib, 0.5, LinearQRConfig())
        glob = empirical_pinball(m.predict(test.features), test.demand, 0.5)
        loc = empirical_pinball(m.with_pooling(PoolingSpec.count(20)).predict(test.features),
                                test.demand, 0.5)
        better += loc < glob
    assert better == 20


def test_well_specified_correction_is_small():
    # oracle base model on uniform noise: the correction is of order statistic spacing
    r = np.random.default_rng(0)
    n2 = 10_000
    X = r.uniform(size=(n2, 1))
    y = 3 * X[:, 0] + r.uniform(-1, 1, size=n2)
    alpha = 0.3
    oracle = FixedModel(lambda Z: 3 * Z[:, 0] + (2 * alpha - 1), alpha, 1)
    q = calibrate(oracle, Dataset(X, y), alpha).corrections(X[:1])[0][0]
    # the alpha-quantile of U(-1, 1) has standard error 2 sqrt(a(1-a)/n2) ~ 0.009
    assert abs(q) < 0.05


def test_translation_equivariance_linear_qr():
    train, calib, test = _linear(150, 14), _linear(80, 15), _linear(20, 16)
    m1 = cqpc_fit(train, calib, 0.6, LinearQRConfig())
    c = 12.5
    m2 = cqpc_fit(train.with_demand(train.demand + c), calib.with_demand(calib.demand + c), 0.6,
                  LinearQRConfig())
    assert np.allclose(m2.predict(test.features) - m1.predict(test.features), c, atol=1e-6)


class CountingLearner:
    name = "counting"

    def __init__(self):
        self.calls = 0

    def fit(self, X, y, alpha):
        self.calls += 1
        return LinearQRConfig().fit(X, y, alpha)


def test_gtlc_fits_once_and_is_deterministic():
    d = generate(GeneratorSpec("example3", seed=3), 800)
    train, calib = d.subset(range(500)), d.subset(range(500, 800))
    cands = [PoolingSpec.count(10), PoolingSpec.count(20), PoolingSpec.all()]
    ln = CountingLearner()
    a = gtlc_select(train, calib, 0.5, ln, cands, folds=5, seed=1)
    assert ln.calls == 1
    b = gtlc_select(train, calib, 0.5, ln, cands, folds=5, seed=1)
    assert a.as_rows() == b.as_rows()


def test_gtlc_single_candidate():
    d = _linear(300, 17)
    res = gtlc_select(d.subset(range(200)), d.subset(range(200, 300)), 0.5, LinearQRConfig(),
                      [PoolingSpec.count(5)])
    assert res.best == PoolingSpec.count(5)
    assert math.isfinite(res.table[0]["mean_loss"])


def test_gtlc_prefers_local_on_piecewise_model():
    d = generate(GeneratorSpec("example3", seed=11), 1000)
    train, calib = d.subset(range(600)), d.subset(range(600, 1000))
    n_rest = 400 * 4 // 5
    res = gtlc_select(train, calib, 0.5, LinearQRConfig(),
                      [PoolingSpec.count(n_rest), PoolingSpec.count(20)], folds=5)
    assert res.best == PoolingSpec.count(20)


def test_gtlc_infeasible_candidates():
    d = _linear(200, 18)
    train, calib = d.subset(range(150)), d.subset(range(150, 200))
    res = gtlc_select(train, calib, 0.5, LinearQRConfig(), [PoolingSpec.count(45), PoolingSpec.count(5)])
    assert res.table[0]["feasible"] is False and res.best == PoolingSpec.count(5)
    with pytest.raises(InsufficientDataError):
        gtlc_select(train, calib, 0.5, LinearQRConfig(), [PoolingSpec.count(45)])
    with pytest.raises(ConfigError):
        gtlc_select(train, calib, 0.5, LinearQRConfig(), [PoolingSpec.all()], folds=1)


def test_coverage_bounds_examples():
    assert coverage_bounds(99, 0.5) == pytest.approx((0.5, 0.51))
    assert coverage_bounds(1, 0.25) == (0.25, 0.75)
    lo, hi = coverage_bounds(10**6, 0.3)
    assert hi - lo < 1e-5


def test_reference_interval_examples():
    lo, hi = reference_interval([0.0], lambda x: 10.0, [1, 2, 3, 4], 0.5)
    assert (lo, hi) == (7.0, 13.0)
    lo, hi = reference_interval([0.0], lambda x: 0.0, [1, 2, 3], 0.01)
    assert hi == 3.0


def test_reference_interval_coverage():
    r = np.random.default_rng(2)
    hits, trials = 0, 2000
    for _ in range(trials):
        res = np.abs(r.normal(size=19))
        y = r.normal()
        lo, hi = reference_interval([0.0], lambda x: 0.0, res, 0.1)
        hits += lo <= y <= hi
    sigma = math.sqrt(0.9 * 0.1 / trials)
    assert hits / trials >= 0.9 - 3 * sigma


def test_unconditional_coverage_small():
    trials, n2, alpha = 400, 49, 0.25
    hits = 0
    fn = lambda X: X[:, 0]  # noqa: E731
    for t in range(trials):
        d = generate(GeneratorSpec("linear", d=1, theta=(1.0,), seed=1000 + t), n2 + 1)
        m = calibrate(FixedModel(fn, alpha, 1, bias=0.7), d.subset(range(n2)), alpha)
        hits += d.demand[n2] <= m.predict(d.features[n2])
    sigma = math.sqrt(alpha * (1 - alpha) / trials)
    assert alpha - 3 * sigma <= hits / trials <= alpha + 1 / (n2 + 1) + 3 * sigma
