from __future__ import annotations

import numpy as np
import pytest
from scipy.optimize import linprog

from conformal_newsvendor.core import Dataset
from conformal_newsvendor.errors import ConfigError, DegenerateTreeError
from conformal_newsvendor.loss import empirical_pinball, empirical_quantile
from conformal_newsvendor.regressors import (FixedLearner, GBQConfig, KNNQConfig, LinearQRConfig,
                                             fit_gbq, fit_knnq, fit_linear_qr, make_learner)


def lp_quantile_objective(X, y, alpha):
    """Optimal mean pinball loss of an affine fit, by linear programming."""
    n, d = X.shape
    # variables: a, theta (free), u+ (n), u- (n)
    c = np.concatenate([np.zeros(d + 1), alpha * np.ones(n), (1 - alpha) * np.ones(n)]) / n
    A = np.hstack([np.ones((n, 1)), X, np.eye(n), -np.eye(n)])
    bounds = [(None, None)] * (d + 1) + [(0, None)] * (2 * n)
    res = linprog(c, A_eq=A, b_eq=y, bounds=bounds, method="highs")
    assert res.status == 0
    return res.fun


def test_intercept_only_median():
    X = np.ones((5, 2))
    m = fit_linear_qr(Dataset(X, [1, 2, 3, 4, 5]), 0.5)
    assert abs(m.predict([1.0, 1.0]) - 3.0) < 1e-3


def test_noiseless_line():
    x = np.linspace(-1, 1, 50)[:, None]
    m = fit_linear_qr(Dataset(x, 2 * x[:, 0]), 0.7)
    assert abs(m.theta[0] - 2) < 1e-2
    assert m.loss(x, 2 * x[:, 0]) < 1e-3


def test_constant_target():
    X = np.random.default_rng(0).normal(size=(30, 2))
    m = fit_linear_qr(Dataset(X, np.full(30, 7.0)), 0.3)
    assert np.allclose(m.predict(X), 7.0)
    assert m.loss(X, np.full(30, 7.0)) == pytest.approx(0.0, abs=1e-12)


def test_lqr_matches_lp_oracle():
    r = np.random.default_rng(1)
    for _ in range(20):
        n, d = int(r.integers(5, 41)), int(r.integers(1, 4))
        X = r.normal(size=(n, d))
        y = X @ r.normal(size=d) + r.standard_t(3, size=n)
        alpha = float(r.uniform(0.1, 0.9))
        m = LinearQRConfig().fit(X, y, alpha)
        assert empirical_pinball(m.predict(X), y, alpha) <= lp_quantile_objective(X, y, alpha) + 1e-3


def test_lqr_permutation_invariance():
    r = np.random.default_rng(2)
    X = r.normal(size=(200, 3))
    y = X @ [1.0, -1.0, 0.5] + r.normal(size=200)
    a = LinearQRConfig().fit(X, y, 0.3)
    p = r.permutation(200)
    b = LinearQRConfig().fit(X[p], y[p], 0.3)
    assert np.max(np.abs(a.predict(X) - b.predict(X))) < 1e-6
    assert abs(a.loss(X, y) - b.loss(X, y)) < 1e-8


def test_lqr_ridge_shrinks():
    r = np.random.default_rng(3)
    X = r.normal(size=(100, 2))
    y = X @ [3.0, -2.0] + r.normal(size=100)
    free = LinearQRConfig().fit(X, y, 0.5)
    ridge = LinearQRConfig(ridge_lambda=1.0).fit(X, y, 0.5)
    assert np.linalg.norm(ridge.theta) < np.linalg.norm(free.theta)


def test_lqr_config_validation():
    with pytest.raises(ConfigError):
        LinearQRConfig(tol=0)
    with pytest.raises(ConfigError):
        LinearQRConfig(max_iters=0)
    with pytest.raises(ConfigError):
        LinearQRConfig(ridge_lambda=-1)


def test_lqr_nonconvergence_flag():
    r = np.random.default_rng(4)
    X = r.normal(size=(100, 2))
    y = X @ [1.0, 2.0] + r.normal(size=100)
    m = LinearQRConfig(max_iters=1, polish=False).fit(X, y, 0.5)
    assert not m.converged
    assert np.all(np.isfinite(m.predict(X)))


def test_gbq_zero_trees_is_constant_quantile():
    r = np.random.default_rng(5)
    X, y = r.normal(size=(40, 2)), r.normal(size=40)
    m = fit_gbq(Dataset(X, y), 0.3, GBQConfig(n_trees=0))
    assert np.all(m.predict(X) == np.sort(y)[int(np.ceil(0.3 * 40)) - 1])
    assert m.predict(X)[0] == empirical_quantile(y, 0.3)


def test_gbq_step_function():
    x = np.linspace(-1, 1, 101)[:, None]
    y = (x[:, 0] > 0).astype(float)
    m = GBQConfig(n_trees=1, max_depth=1, learning_rate=1.0, min_leaf=1).fit(x, y, 0.5)
    assert empirical_pinball(m.predict(x), y, 0.5) < 1e-6


def test_gbq_deterministic_and_degenerate():
    r = np.random.default_rng(6)
    X, y = r.normal(size=(80, 3)), r.normal(size=80)
    cfg = GBQConfig(n_trees=20, subsample=0.7, seed=9)
    assert np.array_equal(cfg.fit(X, y, 0.5).predict(X), cfg.fit(X, y, 0.5).predict(X))
    with pytest.raises(DegenerateTreeError):
        GBQConfig(min_leaf=81).fit(X, y, 0.5)


def test_gbq_learns_signal():
    r = np.random.default_rng(7)
    X = r.uniform(-1, 1, size=(600, 2))
    y = np.where(X[:, 0] > 0, 3.0, 0.0) + 0.1 * r.normal(size=600)
    m = GBQConfig.lite().fit(X, y, 0.5)
    base = empirical_pinball(np.full(600, np.median(y)), y, 0.5)
    assert m.loss(X, y) < 0.2 * base


def test_knnq_examples():
    r = np.random.default_rng(8)
    X, y = r.normal(size=(30, 2)), r.normal(size=30)
    full = KNNQConfig(k=30).fit(X, y, 0.4)
    assert np.all(full.predict(r.normal(size=(5, 2))) == empirical_quantile(y, 0.4))
    one = KNNQConfig(k=1).fit(X, y, 0.4)
    assert one.predict(X[3]) == y[3]
    tie = KNNQConfig(k=1).fit(np.array([[0.0], [2.0]]), np.array([10.0, 20.0]), 0.5)
    assert tie.predict([1.0]) == 10.0
    with pytest.raises(ConfigError):
        fit_knnq(Dataset(X, y), 0.5, KNNQConfig(k=31))


def test_level_monotonicity_constant_learners():
    r = np.random.default_rng(9)
    X, y = r.normal(size=(60, 2)), r.exponential(size=60)
    levels = np.linspace(0.05, 0.95, 19)
    gb = [GBQConfig(n_trees=0).fit(X, y, a).predict(X[0]) for a in levels]
    knn = [KNNQConfig(k=15).fit(X, y, a).predict(X[0]) for a in levels]
    assert np.all(np.diff(gb) >= 0) and np.all(np.diff(knn) >= 0)


@pytest.mark.parametrize("name", ["linear_qr", "gb_lite", "knn"])
def test_contract_finite_predictions(name):
    r = np.random.default_rng(10)
    X, y = r.normal(size=(120, 3)), r.normal(size=120)
    m = make_learner(name).fit(X, y, 0.5)
    out = m.predict(r.normal(scale=100, size=(20, 3)))
    assert out.shape == (20,) and np.all(np.isfinite(out))
    assert isinstance(m.predict(X[0]), float)


def test_make_learner_errors():
    with pytest.raises(ConfigError, match="unknown learner"):
        make_learner("qrnn")
    with pytest.raises(ConfigError):
        make_learner("knn", bogus=1)


def test_fixed_learner():
    m = FixedLearner(lambda X, a: X[:, 0] + a, bias=1.0).fit(np.zeros((3, 1)), np.zeros(3), 0.25)
    assert m.predict([2.0]) == pytest.approx(3.25)
    assert m.shifted(-1.0).predict([2.0]) == pytest.approx(2.25)
