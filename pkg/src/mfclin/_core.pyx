# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops. Signatures mirror ``_pycore`` exactly."""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, isfinite

cnp.import_array()


def nearest_rep(const double[:, ::1] points, const double[:, ::1] reps):
    cdef Py_ssize_t P = points.shape[0], B = reps.shape[0], n = points.shape[1]
    cdef Py_ssize_t p, b, k, best
    cdef double d, bestd
    idx = np.empty(P, dtype=np.int64)
    dist = np.empty(P, dtype=np.float64)
    cdef cnp.int64_t[::1] idx_v = idx
    cdef double[::1] dist_v = dist
    for p in range(P):
        best = 0
        bestd = 1e300
        for b in range(B):
            d = 0.0
            for k in range(n):
                d += fabs(points[p, k] - reps[b, k])
            d = 0.5 * d
            if d < bestd:
                bestd = d
                best = b
        idx_v[p] = best
        dist_v[p] = bestd
    return idx, dist


def sample_inverse_cdf(const double[:, ::1] cdf, const cnp.int64_t[::1] rows, const double[::1] u):
    cdef Py_ssize_t N = rows.shape[0], K = cdf.shape[1], i, k
    cdef cnp.int64_t r
    out = np.empty(N, dtype=np.int64)
    cdef cnp.int64_t[::1] out_v = out
    for i in range(N):
        r = rows[i]
        k = 0
        while k < K - 1 and u[i] >= cdf[r, k]:
            k += 1
        out_v[i] = k
    return out


def bellman_sweep(const double[:, ::1] stage, const cnp.int64_t[:, ::1] nxt, const double[::1] V, double beta):
    cdef Py_ssize_t B = stage.shape[0], C = stage.shape[1], i, c, arg
    cdef double q, best
    Vnew = np.empty(B, dtype=np.float64)
    greedy = np.empty(B, dtype=np.int64)
    cdef double[::1] Vn = Vnew
    cdef cnp.int64_t[::1] g = greedy
    for i in range(B):
        arg = 0
        best = stage[i, 0] + beta * V[nxt[i, 0]]
        for c in range(1, C):
            q = stage[i, c] + beta * V[nxt[i, c]]
            if q < best:
                best = q
                arg = c
        Vn[i] = best
        g[i] = arg
    return Vnew, greedy


def linear_sa(double[:, ::1] theta, double[:, :, ::1] q, cnp.int64_t[::1] visits,
              const cnp.int64_t[::1] xu, const double[:, ::1] phi, const double[::1] cost,
              const cnp.int64_t[::1] nxt):
    cdef Py_ssize_t T = xu.shape[0], d = phi.shape[1], n = q.shape[2]
    cdef Py_ssize_t t, i, j
    cdef cnp.int64_t s
    cdef double a, pred, err, target
    for t in range(T):
        s = xu[t]
        visits[s] += 1
        a = 1.0 / visits[s]
        pred = 0.0
        for i in range(d):
            pred += phi[t, i] * theta[s, i]
        err = cost[t] - pred
        for i in range(d):
            theta[s, i] += a * phi[t, i] * err
        for j in range(n):
            target = 1.0 if nxt[t] == j else 0.0
            pred = 0.0
            for i in range(d):
                pred += phi[t, i] * q[s, i, j]
            err = target - pred
            for i in range(d):
                q[s, i, j] += a * phi[t, i] * err


def sgd_quadratic(const double[:, ::1] K, const double[::1] H, const double[::1] v0):
    cdef Py_ssize_t T = K.shape[0], d = K.shape[1], t, i, j
    cdef double alpha, r, vkv, vkh
    V = np.empty((T + 1, d), dtype=np.float64)
    G = np.empty(T, dtype=np.float64)
    cdef double[:, ::1] Vv = V
    cdef double[::1] Gv = G
    Skk = np.zeros((d, d), dtype=np.float64)
    Skh = np.zeros(d, dtype=np.float64)
    cdef double[:, ::1] skk = Skk
    cdef double[::1] skh = Skh
    cdef double shh = 0.0
    for i in range(d):
        Vv[0, i] = v0[i]
    for t in range(T):
        alpha = 1.0 / (t + 1)
        r = -H[t]
        for i in range(d):
            r += K[t, i] * Vv[t, i]
        for i in range(d):
            Vv[t + 1, i] = Vv[t, i] - alpha * 2.0 * K[t, i] * r
            if not isfinite(Vv[t + 1, i]):
                return V, G, t + 1
        for i in range(d):
            skh[i] += K[t, i] * H[t]
            for j in range(d):
                skk[i, j] += K[t, i] * K[t, j]
        shh += H[t] * H[t]
        vkv = 0.0
        vkh = 0.0
        for i in range(d):
            vkh += Vv[t + 1, i] * skh[i]
            for j in range(d):
                vkv += Vv[t + 1, i] * skk[i, j] * Vv[t + 1, j]
        Gv[t] = (vkv - 2.0 * vkh + shh) / (t + 1)
    return V, G, -1
