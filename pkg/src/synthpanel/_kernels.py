"""Compiled numerical kernels shared by the estimators.

The simplex-constrained least-squares problem

    min_w ||A w - b||^2   s.t.  w >= 0, sum(w) = 1

is solved as the minimum-norm point of the convex hull of the columns of
``C = A - b 1'`` (Wolfe's algorithm). It terminates in finitely many steps,
keeps the active support affinely independent and copes with rank-deficient
problems, which is the usual case in synthetic control where there are
fewer predictors than donors.
"""

from __future__ import annotations

import numpy as np
from numba import njit

_BARY_EPS = 1e-12


@njit(cache=True, nogil=True)
def _solve_small(A, b, n, x):
    # in-place Gaussian elimination with partial pivoting on A[:n, :n]; False if singular
    big = 0.0
    for i in range(n):
        big = max(big, abs(A[i, i]))
    for c in range(n):
        p = c
        for r in range(c + 1, n):
            if abs(A[r, c]) > abs(A[p, c]):
                p = r
        if abs(A[p, c]) <= 1e-14 * big:
            return False
        if p != c:
            for k in range(n):
                t = A[c, k]
                A[c, k] = A[p, k]
                A[p, k] = t
            t = b[c]
            b[c] = b[p]
            b[p] = t
        for r in range(c + 1, n):
            f = A[r, c] / A[c, c]
            if f != 0.0:
                for k in range(c, n):
                    A[r, k] -= f * A[c, k]
                b[r] -= f * b[c]
    for i in range(n - 1, -1, -1):
        acc = b[i]
        for k in range(i + 1, n):
            acc -= A[i, k] * x[k]
        x[i] = acc / A[i, i]
    return True


@njit(cache=True, nogil=True)
def _affine_minimizer(Q, support, size, G, rhs, alpha):
    # min ||sum a_i q_i|| s.t. sum(a) = 1; G + 11' is PD iff the support is affinely independent
    K = Q.shape[1]
    for i in range(size):
        qi = Q[support[i]]
        for j in range(i, size):
            qj = Q[support[j]]
            v = 1.0
            for k in range(K):
                v += qi[k] * qj[k]
            G[i, j] = v
            G[j, i] = v
        rhs[i] = 1.0
    if not _solve_small(G, rhs, size, alpha):
        for i in range(size):
            qi = Q[support[i]]
            for j in range(i, size):
                qj = Q[support[j]]
                v = 1.0
                for k in range(K):
                    v += qi[k] * qj[k]
                G[i, j] = v
                G[j, i] = v
        alpha[:size] = np.linalg.lstsq(G[:size, :size].copy(), np.ones(size), rcond=1e-15)[0]
    s = 0.0
    for i in range(size):
        s += alpha[i]
    if s == 0.0 or not np.isfinite(s):
        for i in range(size):
            alpha[i] = 1.0 / size
    else:
        for i in range(size):
            alpha[i] /= s


@njit(cache=True, nogil=True)
def min_norm_point(Q, tol=1e-12, max_iter=0):
    """Wolfe's minimum-norm-point algorithm over the rows of ``Q`` (J x K).

    Returns ``(weights, squared_norm, iterations, converged)``.
    """
    J, K = Q.shape
    if max_iter <= 0:
        max_iter = 50 * (J + K) + 100
    norms = np.empty(J)
    for j in range(J):
        norms[j] = np.dot(Q[j], Q[j])
    scale = max(norms.max(), 1e-300)

    cap = min(J, K + 1) + 1
    support = np.empty(cap, dtype=np.int64)
    lam = np.empty(cap)
    G = np.empty((cap, cap))
    rhs = np.empty(cap)
    alpha = np.empty(cap)
    size = 1
    support[0] = np.argmin(norms)
    lam[0] = 1.0
    x = Q[support[0]].copy()

    converged = False
    prev_xx = np.inf
    it = 0
    while it < max_iter:
        it += 1
        j = 0
        gj = np.inf
        for r in range(J):
            acc = 0.0
            for k in range(K):
                acc += Q[r, k] * x[k]
            if acc < gj:
                gj = acc
                j = r
        xx = 0.0
        for k in range(K):
            xx += x[k] * x[k]
        # KKT on the simplex, or x == 0 at working precision
        if xx - gj <= tol * scale or xx <= 1e-26 * scale:
            converged = True
            break
        if xx >= prev_xx:
            # stalled at working precision
            converged = xx - gj <= 1e-9 * scale
            break
        prev_xx = xx
        in_support = False
        for i in range(size):
            if support[i] == j:
                in_support = True
        if in_support or size >= cap:
            # no admissible improving point at working precision
            converged = xx - gj <= 1e-9 * scale
            break
        support[size] = j
        lam[size] = 0.0
        size += 1

        # minor cycles
        while True:
            _affine_minimizer(Q, support, size, G, rhs, alpha)
            amin = alpha[0]
            for i in range(1, size):
                amin = min(amin, alpha[i])
            if amin > _BARY_EPS:
                lam[:size] = alpha[:size]
                break
            theta = 1.0
            for i in range(size):
                if alpha[i] <= _BARY_EPS:
                    denom = lam[i] - alpha[i]
                    if denom > 0.0:
                        r = lam[i] / denom
                        if r < theta:
                            theta = r
            worst = 0
            for i in range(size):
                lam[i] = theta * alpha[i] + (1.0 - theta) * lam[i]
                if lam[i] < lam[worst]:
                    worst = i
            keep = 0
            for i in range(size):
                if lam[i] > _BARY_EPS and i != worst:
                    support[keep] = support[i]
                    lam[keep] = lam[i]
                    keep += 1
            if keep == 0:
                support[0] = support[worst]
                lam[0] = 1.0
                keep = 1
            size = keep
            total = lam[:size].sum()
            lam[:size] /= total
            if size == 1:
                break
        x[:] = 0.0
        for i in range(size):
            for k in range(K):
                x[k] += lam[i] * Q[support[i], k]

    w = np.zeros(J)
    for i in range(size):
        w[support[i]] = max(lam[i], 0.0)
    w /= w.sum()
    obj = 0.0
    for k in range(K):
        acc = 0.0
        for j in range(J):
            acc += w[j] * Q[j, k]
        obj += acc * acc
    return w, obj, it, converged


@njit(cache=True, nogil=True)
def weighted_simplex_lsq(X1, X0, v):
    """min_w (X1 - X0 w)' diag(v) (X1 - X0 w) over the probability simplex."""
    K, J = X0.shape
    Q = np.empty((J, K))
    for k in range(K):
        s = np.sqrt(max(v[k], 0.0))
        for j in range(J):
            Q[j, k] = s * (X0[k, j] - X1[k])
    return min_norm_point(Q)


@njit(cache=True, nogil=True)
def _v_from_u(u):
    K = u.shape[0]
    v = np.abs(u)
    s = v.sum()
    if s <= 0.0 or not np.isfinite(s):
        return np.full(K, 1.0 / K)
    return v / s


@njit(cache=True, nogil=True)
def validation_loss(u, X1t, X0t, Y1v, Y0v):
    v = _v_from_u(u)
    w, _, _, _ = weighted_simplex_lsq(X1t, X0t, v)
    r = Y1v - Y0v @ w
    return np.dot(r, r) / r.shape[0]


@njit(cache=True, nogil=True)
def nelder_mead(x0, step, X1t, X0t, Y1v, Y0v, max_fev, xatol, fatol):
    """Nelder-Mead on ``validation_loss``; returns ``(x, f, n_fev, converged)``."""
    n = x0.shape[0]
    sim = np.empty((n + 1, n))
    fs = np.empty(n + 1)
    sim[0] = x0
    for i in range(n):
        p = x0.copy()
        p[i] = p[i] + step
        sim[i + 1] = p
    for i in range(n + 1):
        fs[i] = validation_loss(sim[i], X1t, X0t, Y1v, Y0v)
    n_fev = n + 1
    converged = False
    while n_fev < max_fev:
        order = np.argsort(fs, kind="mergesort")
        sim = sim[order]
        fs = fs[order]
        spread_x = 0.0
        for i in range(1, n + 1):
            d = np.max(np.abs(sim[i] - sim[0]))
            if d > spread_x:
                spread_x = d
        spread_f = np.max(np.abs(fs[1:] - fs[0]))
        if spread_x <= xatol or spread_f <= fatol:
            converged = True
            break
        centroid = sim[:n].sum(axis=0) / n
        xr = centroid + (centroid - sim[n])
        fr = validation_loss(xr, X1t, X0t, Y1v, Y0v)
        n_fev += 1
        if fr < fs[0]:
            xe = centroid + 2.0 * (centroid - sim[n])
            fe = validation_loss(xe, X1t, X0t, Y1v, Y0v)
            n_fev += 1
            if fe < fr:
                sim[n] = xe
                fs[n] = fe
            else:
                sim[n] = xr
                fs[n] = fr
        elif fr < fs[n - 1]:
            sim[n] = xr
            fs[n] = fr
        else:
            if fr < fs[n]:
                xc = centroid + 0.5 * (xr - centroid)
            else:
                xc = centroid + 0.5 * (sim[n] - centroid)
            fc = validation_loss(xc, X1t, X0t, Y1v, Y0v)
            n_fev += 1
            if fc < min(fr, fs[n]):
                sim[n] = xc
                fs[n] = fc
            else:
                for i in range(1, n + 1):
                    sim[i] = sim[0] + 0.5 * (sim[i] - sim[0])
                    fs[i] = validation_loss(sim[i], X1t, X0t, Y1v, Y0v)
                n_fev += n
    best = np.argmin(fs)
    return sim[best].copy(), fs[best], n_fev, converged
