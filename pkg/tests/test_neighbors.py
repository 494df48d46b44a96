from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conformal_newsvendor.neighbors import (NeighborIndex, PoolingSpec, build_index, k_nearest,
                                            within_radius)


def brute_knn(P, x, m):
    d2 = ((P - x) ** 2).sum(axis=1)
    return np.lexsort((np.arange(len(P)), d2))[:m]


def test_single_point():
    idx = build_index([[0.3, 0.4]])
    assert list(k_nearest(idx, [9.0, 9.0], 1)) == [0]


def test_duplicates_come_first():
    P = np.array([[5.0], [1.0], [0.0], [1.0]])
    assert list(k_nearest(build_index(P), [1.0], 3)) == [1, 3, 2]


def test_line_example():
    idx = build_index(np.array([[0.0], [1.0], [2.0]]))
    assert list(k_nearest(idx, [0.9], 2)) == [1, 0]
    assert list(k_nearest(idx, [0.9], 3)) == [1, 0, 2]


def test_m_too_large():
    with pytest.raises(ValueError):
        k_nearest(build_index(np.zeros((3, 1))), [0.0], 4)


def test_radius_examples():
    P = np.array([[0.0], [1.0], [3.0]])
    idx = build_index(P)
    assert within_radius(idx, [0.0], 0.5).size == 1  # only the centre point itself
    assert within_radius(idx, [10.0], 1.0).size == 0
    assert list(within_radius(idx, [0.0], math.inf)) == [0, 1, 2]
    # closed ball of diameter 2 around 0 reaches distance exactly 1
    assert list(within_radius(idx, [0.0], 2.0)) == [0, 1]


def test_tree_matches_brute_500_points(rng):
    P = rng.normal(size=(500, 3))
    idx = NeighborIndex(P)
    Q = rng.normal(size=(50, 3))
    for m in (1, 7, 50):
        assert np.array_equal(idx.k_nearest_batch(Q, m), idx.k_nearest_batch(Q, m, brute=True))
    for xi in (0.3, 1.0, 2.5):
        a = idx.within_radius_batch(Q, xi)
        b = idx.within_radius_batch(Q, xi, brute=True)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_grid_points_with_ties():
    # integer lattice has many equal distances; ordering must follow row index
    g = np.array([[i, j] for i in range(6) for j in range(6)], dtype=float)
    idx = NeighborIndex(g[::-1].copy(), leaf_size=2)
    q = np.array([[2.5, 2.5], [0.0, 0.0], [3.0, 2.0]])
    assert np.array_equal(idx.k_nearest_batch(q, 10), idx.k_nearest_batch(q, 10, brute=True))
    a = idx.within_radius_batch(q, 3.0)
    b = idx.within_radius_batch(q, 3.0, brute=True)
    assert np.array_equal(a[1], b[1])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 120), d=st.integers(1, 4))
def test_nesting_properties(seed, n, d):
    r = np.random.default_rng(seed)
    P = r.normal(size=(n, d))
    idx = NeighborIndex(P)
    x = r.normal(size=d)
    full = list(idx.k_nearest(x, n))
    for m in range(1, n + 1, max(1, n // 5)):
        assert list(idx.k_nearest(x, m)) == full[:m]
    prev = set()
    for xi in (0.1, 0.5, 1.0, 2.0, 4.0):
        cur = set(idx.within_radius(x, xi).tolist())
        assert prev <= cur
        prev = cur


def test_metric_symmetry(rng):
    from conformal_newsvendor._accel import kernels

    a, b = rng.normal(size=(2, 5))
    dab = kernels.sqdist_rows(a[None, :], b)[0]
    dba = kernels.sqdist_rows(b[None, :], a)[0]
    assert abs(math.sqrt(dab) - math.sqrt(dba)) <= 1e-12


def test_pooling_spec():
    assert PoolingSpec.radius(0.5).label() == "xi=0.5"
    assert PoolingSpec.count(20).size_key == 20
    assert PoolingSpec.all().size_key == math.inf
    with pytest.raises(ValueError):
        PoolingSpec("radius")
    with pytest.raises(ValueError):
        PoolingSpec("count", m=0)
    with pytest.raises(ValueError):
        PoolingSpec("ring")
    # parameters of the inactive mode are ignored
    assert PoolingSpec("all", xi=3.0).mode == "all"
