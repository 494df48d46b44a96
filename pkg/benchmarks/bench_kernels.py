"""Time the compiled kernels against the numpy fallback.

Run ``python3 benchmarks/bench_kernels.py`` after building the extension.
Each kernel is called with identical inputs on both backends and the best
of several repeats is reported, along with a check that outputs agree.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from conformal_newsvendor._accel import compiled_kernels, python_kernels
from conformal_newsvendor.neighbors import NeighborIndex


def best_of(fn, repeat):
    times = []
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def same(a, b, atol):
    if isinstance(a, tuple):
        return all(same(x, y, atol) for x, y in zip(a, b))
    return bool(np.allclose(a, b, rtol=0.0, atol=atol))


def cases(rng):
    pts = rng.uniform(size=(2000, 3))
    Q = rng.uniform(size=(300, 3))
    tree = NeighborIndex(pts)._tree()
    X = rng.uniform(size=(1500, 5))
    g = rng.normal(size=1500)
    order = np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T.astype(np.int64))
    scores = rng.normal(size=2000)
    idx = np.ascontiguousarray(np.argsort(rng.uniform(size=(300, 2000)), axis=1)[:, :50].astype(np.int64))
    indptr = np.concatenate([[0], np.cumsum(rng.integers(20, 80, size=300))]).astype(np.int64)
    flat = rng.integers(0, 2000, size=int(indptr[-1])).astype(np.int64)
    ranks = rng.integers(1, 20, size=300).astype(np.int64)
    A = np.column_stack([np.ones(500), rng.normal(size=(500, 3))])
    t = A @ np.array([0.2, 1.0, -0.5, 0.3]) + rng.normal(size=500)
    pen = np.zeros(4)
    # (kernel call, tolerance for the agreement check); the smoothed solver
    # sums in a different order per backend, so it agrees only to solver tolerance
    return {
        "kdtree_knn (2000 pts, 300 q, m=50)": (lambda k: k.kdtree_knn(*tree, Q, 50), 0.0),
        "kdtree_radius (2000 pts, 300 q)": (lambda k: k.kdtree_radius(*tree, Q, 0.04)[:2], 0.0),
        "best_split (1500 x 5)": (lambda k: k.best_split(X, g, order, 10, 1e-12), 0.0),
        "rowwise_kth (300 x 50)": (lambda k: k.rowwise_kth(scores, idx, 25), 0.0),
        "csr_kth (300 ragged rows)": (lambda k: k.csr_kth(scores, indptr, flat, ranks), 0.0),
        "smoothed_qr (500 x 4)": (lambda k: k.smoothed_qr(A, t, 0.5, pen, 0.5, 1e-5, 0.2, 0.0,
                                                          20000, 1e-9)[0], 1e-6),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    py, cy = python_kernels(), compiled_kernels()
    if cy is None:
        print("compiled extension not available; build it with pip install -e .")
        return 1
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':40s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}  agree")
    for name, (fn, atol) in cases(rng).items():
        tp, op = best_of(lambda: fn(py), args.repeat)
        tc, oc = best_of(lambda: fn(cy), args.repeat)
        print(f"{name:40s} {1e3 * tp:10.2f} {1e3 * tc:10.2f} {tp / tc:8.1f}  {same(op, oc, atol)}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
