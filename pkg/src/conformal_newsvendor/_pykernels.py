"""Pure Python / numpy implementations of the hot kernels.

Semantics are shared with ``_kernels.pyx``; where results must agree bit
for bit (distances, split gains) the floating-point operations are written
in the same order in both files.
"""

from __future__ import annotations

import heapq

import numpy as np
from scipy.special import expit

BACKEND = "python"


def sqdist_rows(points, x):
    """Squared Euclidean distance from ``x`` to every row, summed left to right."""
    points = np.asarray(points, dtype=float)
    acc = (points[:, 0] - x[0]) ** 2
    for j in range(1, points.shape[1]):
        acc += (points[:, j] - x[j]) ** 2
    return acc


def _box_mindist(x, lo, hi):
    s = 0.0
    for j in range(x.shape[0]):
        if x[j] < lo[j]:
            t = lo[j] - x[j]
            s += t * t
        elif x[j] > hi[j]:
            t = x[j] - hi[j]
            s += t * t
    return s


def _point_sqdist(p, x):
    s = 0.0
    for j in range(x.shape[0]):
        t = p[j] - x[j]
        s += t * t
    return s


def kdtree_knn(points, perm, start, end, left, right, lo, hi, queries, m):
    """``m`` nearest points per query, ordered by (distance, index)."""
    q = queries.shape[0]
    out_idx = np.empty((q, m), dtype=np.int64)
    out_d2 = np.empty((q, m), dtype=float)
    pts = points.tolist()
    for qi in range(q):
        x = queries[qi]
        xl = x.tolist()
        heap = []  # max-heap on (d2, idx) via negation
        stack = [(_box_mindist(x, lo[0], hi[0]), 0)]
        while stack:
            md, node = stack.pop()
            if len(heap) == m and md > -heap[0][0]:
                continue
            if left[node] < 0:
                for k in range(start[node], end[node]):
                    i = int(perm[k])
                    p = pts[i]
                    s = 0.0
                    for j in range(len(xl)):
                        t = p[j] - xl[j]
                        s += t * t
                    if len(heap) < m:
                        heapq.heappush(heap, (-s, -i))
                    else:
                        wd, wi = -heap[0][0], -heap[0][1]
                        if s < wd or (s == wd and i < wi):
                            heapq.heapreplace(heap, (-s, -i))
                continue
            a, b = int(left[node]), int(right[node])
            da = _box_mindist(x, lo[a], hi[a])
            db = _box_mindist(x, lo[b], hi[b])
            if da <= db:
                stack.append((db, b))
                stack.append((da, a))
            else:
                stack.append((da, a))
                stack.append((db, b))
        found = sorted((-d, -i) for d, i in heap)
        out_d2[qi] = [d for d, _ in found]
        out_idx[qi] = [i for _, i in found]
    return out_idx, out_d2


def kdtree_radius(points, perm, start, end, left, right, lo, hi, queries, r2):
    """All points with squared distance <= ``r2``; CSR output sorted per query."""
    q = queries.shape[0]
    indptr = np.zeros(q + 1, dtype=np.int64)
    all_idx, all_d2 = [], []
    pts = points.tolist()
    for qi in range(q):
        x = queries[qi]
        xl = x.tolist()
        found = []
        stack = [0]
        while stack:
            node = stack.pop()
            if _box_mindist(x, lo[node], hi[node]) > r2:
                continue
            if left[node] < 0:
                for k in range(start[node], end[node]):
                    i = int(perm[k])
                    p = pts[i]
                    s = 0.0
                    for j in range(len(xl)):
                        t = p[j] - xl[j]
                        s += t * t
                    if s <= r2:
                        found.append((s, i))
                continue
            stack.append(int(right[node]))
            stack.append(int(left[node]))
        found.sort()
        all_d2.extend(d for d, _ in found)
        all_idx.extend(i for _, i in found)
        indptr[qi + 1] = len(all_idx)
    return indptr, np.asarray(all_idx, dtype=np.int64), np.asarray(all_d2, dtype=float)


def best_split(X, g, order, min_leaf, min_gain):
    """Variance-reduction split search over presorted rows.

    ``order[f]`` lists the node's rows sorted by feature ``f``.  Returns
    ``(gain, feature, threshold, n_left)`` with ``feature == -1`` when no
    split beats ``min_gain``.
    """
    n = order.shape[1]
    best = (min_gain, -1, 0.0, 0)
    if n < 2 * min_leaf:
        return best
    nl = np.arange(1, n, dtype=float)
    nr = n - nl
    size_ok = (nl >= min_leaf) & (nr >= min_leaf)
    for f in range(order.shape[0]):
        rows = order[f]
        cs = np.cumsum(g[rows])
        s = cs[-1]
        sl = cs[:-1]
        sr = s - sl
        gain = sl * sl / nl + sr * sr / nr - s * s / n
        vals = X[rows, f]
        valid = size_ok & (vals[:-1] < vals[1:])
        if not valid.any():
            continue
        gain = np.where(valid, gain, -np.inf)
        i = int(np.argmax(gain))
        if gain[i] > best[0]:
            a, b = vals[i], vals[i + 1]
            thr = a + 0.5 * (b - a)
            if thr >= b:
                thr = a
            best = (float(gain[i]), f, float(thr), i + 1)
    return best


def rowwise_kth(values, idx, k):
    """k-th smallest (1-based) of ``values[idx[r]]`` for every row ``r``."""
    sub = np.asarray(values, dtype=float)[idx]
    return np.partition(sub, k - 1, axis=1)[:, k - 1]


def csr_kth(values, indptr, indices, ks):
    """k-th smallest of each CSR segment, ``ks`` giving the 1-based rank per row."""
    values = np.asarray(values, dtype=float)
    out = np.empty(len(indptr) - 1)
    for r in range(len(out)):
        seg = values[indices[indptr[r]:indptr[r + 1]]]
        out[r] = np.partition(seg, ks[r] - 1)[ks[r] - 1]
    return out


def _qr_obj_grad(A, t, beta, alpha, h, pen):
    u = t - A @ beta
    z = u / h
    # smoothed check loss alpha*u + h*log(1 + exp(-u/h))
    soft = np.maximum(-z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    obj = float(np.mean(alpha * u + h * soft)) + float(pen @ (beta * beta))
    psi = alpha - expit(-z)
    grad = -(A.T @ psi) / A.shape[0] + 2.0 * pen * beta
    return obj, grad


def smoothed_qr(A, t, alpha, penalty, h0, hmin, hdecay, step_init, max_iters, tol):
    """Minimise a logistic-smoothed check loss, shrinking the bandwidth.

    Each bandwidth stage runs gradient descent with Barzilai-Borwein trial
    steps safeguarded by Armijo backtracking.  Intermediate stages stop at a
    looser tolerance proportional to the bandwidth.  ``A`` is the (n, p)
    design including the intercept column and ``penalty`` the per-coefficient
    ridge weight.  Returns ``(beta, iterations, converged)``.
    """
    A = np.asarray(A, dtype=float)
    t = np.asarray(t, dtype=float)
    pen = np.asarray(penalty, dtype=float)
    beta = np.zeros(A.shape[1])
    h = h0
    f, grad = _qr_obj_grad(A, t, beta, alpha, h, pen)
    step = step_init if step_init > 0 else h
    it = 0
    converged = False
    while it < max_iters:
        stage_tol = tol if h <= hmin else max(tol, 1e-3 * h)
        stage_done = False
        while it < max_iters:
            gg = float(grad @ grad)
            while True:
                beta_new = beta - step * grad
                f_new, grad_new = _qr_obj_grad(A, t, beta_new, alpha, h, pen)
                it += 1
                if f_new <= f - 1e-4 * step * gg or step <= 1e-12:
                    break
                step *= 0.5
            s = beta_new - beta
            yv = grad_new - grad
            beta, grad, f = beta_new, grad_new, f_new
            if np.max(np.abs(s)) <= stage_tol:
                stage_done = True
                break
            sy = float(s @ yv)
            if sy > 0.0:
                step = (sy / float(yv @ yv)) if it % 2 else (float(s @ s) / sy)
                step = min(max(step, 1e-12), 1e6)
        if h <= hmin:
            converged = stage_done
            break
        h = max(h * hdecay, hmin)
        f, grad = _qr_obj_grad(A, t, beta, alpha, h, pen)
    return beta, it, converged
