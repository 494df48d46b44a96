from __future__ import annotations

import json
import os
import subprocess
import sys

import numpy as np
import pytest

from conformal_newsvendor._accel import BACKEND, compiled_kernels, python_kernels
from conformal_newsvendor.neighbors import NeighborIndex

compiled = compiled_kernels()
needs_compiled = pytest.mark.skipif(compiled is None, reason="compiled kernels not built")


def _both(call):
    return call(python_kernels()), call(compiled)


@pytest.fixture
def data(rng):
    pts = rng.uniform(size=(400, 3))
    # duplicates exercise the tie rule
    pts[200:220] = pts[:20]
    return pts, rng.uniform(size=(60, 3))


def test_backend_flag():
    assert BACKEND in ("cython", "python")
    assert python_kernels().BACKEND == "python"


@needs_compiled
@pytest.mark.parametrize("m", [1, 7, 400])
def test_knn_parity(data, m):
    pts, Q = data
    tree = NeighborIndex(pts)._tree()
    a, b = _both(lambda k: k.kdtree_knn(*tree, Q, m))
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


@needs_compiled
@pytest.mark.parametrize("r2", [0.0, 0.01, 0.3, 10.0])
def test_radius_parity(data, r2):
    pts, Q = data
    tree = NeighborIndex(pts)._tree()
    a, b = _both(lambda k: k.kdtree_radius(*tree, Q, r2))
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


@needs_compiled
def test_split_and_kth_parity(rng):
    X = rng.uniform(size=(300, 4))
    X[:, 2] = np.round(X[:, 2], 1)
    g = rng.normal(size=300)
    order = np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T.astype(np.int64))
    a, b = _both(lambda k: k.best_split(X, g, order, 5, 1e-12))
    assert a == b
    scores = rng.normal(size=500)
    idx = np.ascontiguousarray(rng.integers(0, 500, size=(40, 30)).astype(np.int64))
    a, b = _both(lambda k: k.rowwise_kth(scores, idx, 12))
    np.testing.assert_array_equal(a, b)
    indptr = np.concatenate([[0], np.cumsum(rng.integers(1, 40, size=40))]).astype(np.int64)
    flat = rng.integers(0, 500, size=int(indptr[-1])).astype(np.int64)
    ks = np.array([rng.integers(1, indptr[i + 1] - indptr[i] + 1) for i in range(40)], dtype=np.int64)
    a, b = _both(lambda k: k.csr_kth(scores, indptr, flat, ks))
    np.testing.assert_array_equal(a, b)


@needs_compiled
def test_smoothed_qr_parity(rng):
    A = np.column_stack([np.ones(300), rng.normal(size=(300, 2))])
    t = A @ np.array([0.1, 1.0, -2.0]) + rng.normal(size=300)
    pen = np.array([0.0, 0.01, 0.01])
    a, b = _both(lambda k: k.smoothed_qr(A, t, 0.3, pen, 0.5, 1e-5, 0.2, 0.0, 20000, 1e-9))
    # the two backends accumulate sums in different orders
    np.testing.assert_allclose(a[0], b[0], atol=1e-6)


_SCRIPT = """
import json
from conformal_newsvendor._accel import BACKEND
from conformal_newsvendor.datagen import GeneratorSpec
from conformal_newsvendor.harness import ExperimentConfig, run_comparison
from conformal_newsvendor.regressors import GBQConfig, KNNQConfig, LinearQRConfig
cfg = ExperimentConfig(learners=(LinearQRConfig(), KNNQConfig(k=15), GBQConfig(n_trees=20)),
                       generator=GeneratorSpec("example3"), n=300, quantiles=(0.5,),
                       pooling=20, replications=2, seed=4)
print(json.dumps({"backend": BACKEND, "losses": [[r.learner, r.variant, r.loss] for r in run_comparison(cfg)]}))
"""


def _run(env_extra):
    env = dict(os.environ)
    env.pop("CNV_PURE_PYTHON", None)
    env.update(env_extra)
    out = subprocess.run([sys.executable, "-c", _SCRIPT], env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout)


@needs_compiled
def test_end_to_end_parity_across_backends():
    pure = _run({"CNV_PURE_PYTHON": "1"})
    fast = _run({})
    assert pure["backend"] == "python" and fast["backend"] == "cython"
    for (ln, var, a), (_, _, b) in zip(pure["losses"], fast["losses"]):
        if ln == "linear_qr":
            assert a == pytest.approx(b, abs=1e-6)
        else:
            assert a == b, (ln, var)
