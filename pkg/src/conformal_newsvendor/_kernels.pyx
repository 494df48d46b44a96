# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the hot kernels in ``_pykernels``.

Keep the arithmetic in the same order as the Python file: the tree and
split-search tests compare the two backends for exact equality.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, fabs, log1p, INFINITY
from libc.stdlib cimport malloc, free

cnp.import_array()

BACKEND = "cython"


cdef inline double _sqdist(const double[:, ::1] pts, Py_ssize_t i, const double[::1] x) noexcept nogil:
    cdef Py_ssize_t j
    cdef double s = 0.0, t
    for j in range(x.shape[0]):
        t = pts[i, j] - x[j]
        s += t * t
    return s


cdef inline double _mindist(const double[:, ::1] lo, const double[:, ::1] hi, Py_ssize_t node,
                            const double[::1] x) noexcept nogil:
    cdef Py_ssize_t j
    cdef double s = 0.0, t
    for j in range(x.shape[0]):
        if x[j] < lo[node, j]:
            t = lo[node, j] - x[j]
            s += t * t
        elif x[j] > hi[node, j]:
            t = x[j] - hi[node, j]
            s += t * t
    return s


def sqdist_rows(points, x):
    cdef const double[:, ::1] pts = np.ascontiguousarray(points, dtype=np.float64)
    cdef const double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t i, n = pts.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            o[i] = _sqdist(pts, i, xv)
    return out


# max-heap on (d2, idx): entry a is "worse" than b when it sorts later
cdef inline bint _worse(double da, long long ia, double db, long long ib) noexcept nogil:
    return da > db or (da == db and ia > ib)


cdef void _sift_down(double* hd, long long* hi_, Py_ssize_t size, Py_ssize_t pos) noexcept nogil:
    cdef Py_ssize_t child
    cdef double td
    cdef long long ti
    while True:
        child = 2 * pos + 1
        if child >= size:
            break
        if child + 1 < size and _worse(hd[child + 1], hi_[child + 1], hd[child], hi_[child]):
            child += 1
        if _worse(hd[child], hi_[child], hd[pos], hi_[pos]):
            td = hd[pos]; hd[pos] = hd[child]; hd[child] = td
            ti = hi_[pos]; hi_[pos] = hi_[child]; hi_[child] = ti
            pos = child
        else:
            break


cdef void _sift_up(double* hd, long long* hi_, Py_ssize_t pos) noexcept nogil:
    cdef Py_ssize_t parent
    cdef double td
    cdef long long ti
    while pos > 0:
        parent = (pos - 1) // 2
        if _worse(hd[pos], hi_[pos], hd[parent], hi_[parent]):
            td = hd[pos]; hd[pos] = hd[parent]; hd[parent] = td
            ti = hi_[pos]; hi_[pos] = hi_[parent]; hi_[parent] = ti
            pos = parent
        else:
            break


def kdtree_knn(points, perm, start, end, left, right, lo, hi, queries, Py_ssize_t m):
    cdef const double[:, ::1] pts = np.ascontiguousarray(points, dtype=np.float64)
    cdef const long long[::1] pm = np.ascontiguousarray(perm, dtype=np.int64)
    cdef const long long[::1] st = np.ascontiguousarray(start, dtype=np.int64)
    cdef const long long[::1] en = np.ascontiguousarray(end, dtype=np.int64)
    cdef const long long[::1] lf = np.ascontiguousarray(left, dtype=np.int64)
    cdef const long long[::1] rt = np.ascontiguousarray(right, dtype=np.int64)
    cdef const double[:, ::1] blo = np.ascontiguousarray(lo, dtype=np.float64)
    cdef const double[:, ::1] bhi = np.ascontiguousarray(hi, dtype=np.float64)
    cdef const double[:, ::1] qs = np.ascontiguousarray(queries, dtype=np.float64)
    cdef Py_ssize_t q = qs.shape[0], n_nodes = st.shape[0]
    out_idx = np.empty((q, m), dtype=np.int64)
    out_d2 = np.empty((q, m), dtype=np.float64)
    cdef long long[:, ::1] oi = out_idx
    cdef double[:, ::1] od = out_d2
    if m == 0 or q == 0:
        return out_idx, out_d2

    cdef double* hd = <double*> malloc(m * sizeof(double))
    cdef long long* hx = <long long*> malloc(m * sizeof(long long))
    cdef long long* stack_node = <long long*> malloc((n_nodes + 1) * sizeof(long long))
    cdef double* stack_md = <double*> malloc((n_nodes + 1) * sizeof(double))
    cdef Py_ssize_t qi, size, sp, k, a, b, last
    cdef long long node, i
    cdef double md, s, da, db, td
    cdef long long ti
    try:
        with nogil:
            for qi in range(q):
                size = 0
                sp = 0
                stack_node[0] = 0
                stack_md[0] = _mindist(blo, bhi, 0, qs[qi])
                sp = 1
                while sp > 0:
                    sp -= 1
                    node = stack_node[sp]
                    md = stack_md[sp]
                    if size == m and md > hd[0]:
                        continue
                    if lf[node] < 0:
                        for k in range(st[node], en[node]):
                            i = pm[k]
                            s = _sqdist(pts, i, qs[qi])
                            if size < m:
                                hd[size] = s
                                hx[size] = i
                                _sift_up(hd, hx, size)
                                size += 1
                            elif _worse(hd[0], hx[0], s, i):
                                hd[0] = s
                                hx[0] = i
                                _sift_down(hd, hx, size, 0)
                        continue
                    a = lf[node]
                    b = rt[node]
                    da = _mindist(blo, bhi, a, qs[qi])
                    db = _mindist(blo, bhi, b, qs[qi])
                    if da <= db:
                        stack_node[sp] = b; stack_md[sp] = db; sp += 1
                        stack_node[sp] = a; stack_md[sp] = da; sp += 1
                    else:
                        stack_node[sp] = a; stack_md[sp] = da; sp += 1
                        stack_node[sp] = b; stack_md[sp] = db; sp += 1
                # heap-sort into ascending (d2, idx)
                last = size - 1
                while last >= 0:
                    od[qi, last] = hd[0]
                    oi[qi, last] = hx[0]
                    hd[0] = hd[last]
                    hx[0] = hx[last]
                    _sift_down(hd, hx, last, 0)
                    last -= 1
    finally:
        free(hd)
        free(hx)
        free(stack_node)
        free(stack_md)
    return out_idx, out_d2


def kdtree_radius(points, perm, start, end, left, right, lo, hi, queries, double r2):
    cdef const double[:, ::1] pts = np.ascontiguousarray(points, dtype=np.float64)
    cdef const long long[::1] pm = np.ascontiguousarray(perm, dtype=np.int64)
    cdef const long long[::1] st = np.ascontiguousarray(start, dtype=np.int64)
    cdef const long long[::1] en = np.ascontiguousarray(end, dtype=np.int64)
    cdef const long long[::1] lf = np.ascontiguousarray(left, dtype=np.int64)
    cdef const long long[::1] rt = np.ascontiguousarray(right, dtype=np.int64)
    cdef const double[:, ::1] blo = np.ascontiguousarray(lo, dtype=np.float64)
    cdef const double[:, ::1] bhi = np.ascontiguousarray(hi, dtype=np.float64)
    cdef const double[:, ::1] qs = np.ascontiguousarray(queries, dtype=np.float64)
    cdef Py_ssize_t q = qs.shape[0], n_nodes = st.shape[0], n = pts.shape[0]
    indptr = np.zeros(q + 1, dtype=np.int64)
    cdef long long[::1] ip = indptr
    chunks_i = []
    chunks_d = []
    buf_i = np.empty(n, dtype=np.int64)
    buf_d = np.empty(n, dtype=np.float64)
    cdef long long[::1] bi = buf_i
    cdef double[::1] bd = buf_d
    cdef long long* stack_node = <long long*> malloc((n_nodes + 1) * sizeof(long long))
    cdef Py_ssize_t qi, sp, k, cnt
    cdef long long node, i
    cdef double s
    cdef long long total = 0
    try:
        for qi in range(q):
            cnt = 0
            with nogil:
                stack_node[0] = 0
                sp = 1
                while sp > 0:
                    sp -= 1
                    node = stack_node[sp]
                    if _mindist(blo, bhi, node, qs[qi]) > r2:
                        continue
                    if lf[node] < 0:
                        for k in range(st[node], en[node]):
                            i = pm[k]
                            s = _sqdist(pts, i, qs[qi])
                            if s <= r2:
                                bi[cnt] = i
                                bd[cnt] = s
                                cnt += 1
                        continue
                    stack_node[sp] = rt[node]; sp += 1
                    stack_node[sp] = lf[node]; sp += 1
            if cnt:
                order = np.lexsort((buf_i[:cnt], buf_d[:cnt]))
                chunks_i.append(buf_i[:cnt][order])
                chunks_d.append(buf_d[:cnt][order])
            total += cnt
            ip[qi + 1] = total
    finally:
        free(stack_node)
    if chunks_i:
        return indptr, np.concatenate(chunks_i), np.concatenate(chunks_d)
    return indptr, np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64)


def best_split(X, g, order, Py_ssize_t min_leaf, double min_gain):
    cdef const double[:, :] Xv = np.asarray(X, dtype=np.float64)
    cdef const double[::1] gv = np.ascontiguousarray(g, dtype=np.float64)
    cdef const long long[:, ::1] ov = np.ascontiguousarray(order, dtype=np.int64)
    cdef Py_ssize_t d = ov.shape[0], n = ov.shape[1]
    cdef double best_gain = min_gain, best_thr = 0.0
    cdef Py_ssize_t best_f = -1, best_nl = 0
    if n < 2 * min_leaf:
        return (best_gain, -1, 0.0, 0)
    cdef Py_ssize_t f, i, fi_best
    cdef double s, sl, sr, nl, nr, gain, fbest, a, b, thr
    cdef double dn = <double> n
    with nogil:
        for f in range(d):
            s = 0.0
            for i in range(n):
                s += gv[ov[f, i]]
            sl = 0.0
            fbest = -INFINITY
            fi_best = -1
            for i in range(n - 1):
                sl += gv[ov[f, i]]
                nl = <double> (i + 1)
                nr = dn - nl
                if nl < min_leaf or nr < min_leaf:
                    continue
                if not (Xv[ov[f, i], f] < Xv[ov[f, i + 1], f]):
                    continue
                sr = s - sl
                gain = sl * sl / nl + sr * sr / nr - s * s / dn
                if gain > fbest:
                    fbest = gain
                    fi_best = i
            if fi_best >= 0 and fbest > best_gain:
                a = Xv[ov[f, fi_best], f]
                b = Xv[ov[f, fi_best + 1], f]
                thr = a + 0.5 * (b - a)
                if thr >= b:
                    thr = a
                best_gain = fbest
                best_f = f
                best_thr = thr
                best_nl = fi_best + 1
    return (best_gain, best_f, best_thr, best_nl)


cdef double _select(double* buf, Py_ssize_t n, Py_ssize_t k) noexcept nogil:
    """k-th smallest (0-based) by in-place quickselect."""
    cdef Py_ssize_t lo = 0, hi = n - 1, i, j
    cdef double pivot, t
    while lo < hi:
        pivot = buf[(lo + hi) // 2]
        i = lo
        j = hi
        while i <= j:
            while buf[i] < pivot:
                i += 1
            while buf[j] > pivot:
                j -= 1
            if i <= j:
                t = buf[i]; buf[i] = buf[j]; buf[j] = t
                i += 1
                j -= 1
        if k <= j:
            hi = j
        elif k >= i:
            lo = i
        else:
            break
    return buf[k]


def rowwise_kth(values, idx, Py_ssize_t k):
    # numpy's vectorised partition beats a scalar quickselect on equal-width rows
    sub = np.asarray(values, dtype=np.float64)[np.asarray(idx, dtype=np.int64)]
    if sub.shape[0] == 0:
        return np.empty(0, dtype=np.float64)
    if k < 1 or k > sub.shape[1]:
        raise ValueError("rank out of range")
    return np.ascontiguousarray(np.partition(sub, k - 1, axis=1)[:, k - 1])


def csr_kth(values, indptr, indices, ks):
    cdef const double[::1] v = np.ascontiguousarray(values, dtype=np.float64)
    cdef const long long[::1] ip = np.ascontiguousarray(indptr, dtype=np.int64)
    cdef const long long[::1] ix = np.ascontiguousarray(indices, dtype=np.int64)
    cdef const long long[::1] kv = np.ascontiguousarray(ks, dtype=np.int64)
    cdef Py_ssize_t q = ip.shape[0] - 1, r, c, m, widest = 0
    out = np.empty(q, dtype=np.float64)
    cdef double[::1] o = out
    for r in range(q):
        m = ip[r + 1] - ip[r]
        if kv[r] < 1 or kv[r] > m:
            raise ValueError("rank out of range")
        if m > widest:
            widest = m
    cdef double* buf = <double*> malloc((widest + 1) * sizeof(double))
    try:
        with nogil:
            for r in range(q):
                m = ip[r + 1] - ip[r]
                for c in range(m):
                    buf[c] = v[ix[ip[r] + c]]
                o[r] = _select(buf, m, kv[r] - 1)
    finally:
        free(buf)
    return out


cdef inline double _expit(double z) noexcept nogil:
    cdef double e
    if z >= 0:
        e = exp(-z)
        return 1.0 / (1.0 + e)
    e = exp(z)
    return e / (1.0 + e)


cdef double _qr_obj_grad(const double[:, ::1] A, const double[::1] t, const double* beta,
                         double alpha, double h, const double[::1] pen, double* grad,
                         double* psi) noexcept nogil:
    cdef Py_ssize_t n = A.shape[0], p = A.shape[1], i, j
    cdef double u, z, soft, obj = 0.0, reg = 0.0
    for i in range(n):
        u = t[i]
        for j in range(p):
            u -= A[i, j] * beta[j]
        z = u / h
        soft = (-z if z < 0 else 0.0) + log1p(exp(-fabs(z)))
        obj += alpha * u + h * soft
        psi[i] = alpha - _expit(-z)
    for j in range(p):
        grad[j] = 0.0
        reg += pen[j] * beta[j] * beta[j]
    for i in range(n):
        for j in range(p):
            grad[j] += A[i, j] * psi[i]
    for j in range(p):
        grad[j] = -grad[j] / n + 2.0 * pen[j] * beta[j]
    return obj / n + reg


def smoothed_qr(A, t, double alpha, penalty, double h0, double hmin, double hdecay,
                double step_init, Py_ssize_t max_iters, double tol):
    cdef const double[:, ::1] Av = np.ascontiguousarray(A, dtype=np.float64)
    cdef const double[::1] tv = np.ascontiguousarray(t, dtype=np.float64)
    pen_arr = np.ascontiguousarray(penalty, dtype=np.float64)
    cdef const double[::1] pen = pen_arr
    cdef Py_ssize_t n = Av.shape[0], p = Av.shape[1], j
    beta_arr = np.zeros(p, dtype=np.float64)
    cdef double[::1] beta = beta_arr
    cdef double* grad = <double*> malloc(p * sizeof(double))
    cdef double* grad_new = <double*> malloc(p * sizeof(double))
    cdef double* beta_new = <double*> malloc(p * sizeof(double))
    cdef double* psi = <double*> malloc(n * sizeof(double))
    cdef double h = h0, step, sy, ss, yy, sj, yj, delta, f, f_new, gg, stage_tol
    cdef Py_ssize_t it = 0
    cdef bint converged = False, stage_done
    step = step_init if step_init > 0 else h
    try:
        with nogil:
            f = _qr_obj_grad(Av, tv, &beta[0], alpha, h, pen, grad, psi)
            while it < max_iters:
                stage_tol = tol if h <= hmin else (1e-3 * h if 1e-3 * h > tol else tol)
                stage_done = False
                while it < max_iters:
                    gg = 0.0
                    for j in range(p):
                        gg += grad[j] * grad[j]
                    while True:
                        for j in range(p):
                            beta_new[j] = beta[j] - step * grad[j]
                        f_new = _qr_obj_grad(Av, tv, beta_new, alpha, h, pen, grad_new, psi)
                        it += 1
                        if f_new <= f - 1e-4 * step * gg or step <= 1e-12:
                            break
                        step *= 0.5
                    delta = 0.0
                    sy = 0.0
                    ss = 0.0
                    yy = 0.0
                    for j in range(p):
                        sj = beta_new[j] - beta[j]
                        yj = grad_new[j] - grad[j]
                        if fabs(sj) > delta:
                            delta = fabs(sj)
                        sy += sj * yj
                        ss += sj * sj
                        yy += yj * yj
                        beta[j] = beta_new[j]
                        grad[j] = grad_new[j]
                    f = f_new
                    if delta <= stage_tol:
                        stage_done = True
                        break
                    if sy > 0.0:
                        if it % 2:
                            step = sy / yy
                        else:
                            step = ss / sy
                        if step < 1e-12:
                            step = 1e-12
                        elif step > 1e6:
                            step = 1e6
                if h <= hmin:
                    converged = stage_done
                    break
                h = h * hdecay
                if h < hmin:
                    h = hmin
                f = _qr_obj_grad(Av, tv, &beta[0], alpha, h, pen, grad, psi)
    finally:
        free(grad)
        free(grad_new)
        free(beta_new)
        free(psi)
    return beta_arr, it, bool(converged)
