"""Numpy fallback for the compiled core. Same signatures and results."""
import numpy as np


def nearest_rep(points, reps):
    points = np.ascontiguousarray(points, dtype=np.float64)
    reps = np.ascontiguousarray(reps, dtype=np.float64)
    idx = np.empty(points.shape[0], dtype=np.int64)
    dist = np.empty(points.shape[0], dtype=np.float64)
    # chunk so the (P, B, n) difference tensor stays small
    step = max(1, 2**20 // max(1, reps.size))
    for lo in range(0, points.shape[0], step):
        blk = points[lo:lo + step]
        d = 0.5 * np.abs(blk[:, None, :] - reps[None, :, :]).sum(axis=2)
        i = d.argmin(axis=1)
        idx[lo:lo + step] = i
        dist[lo:lo + step] = d[np.arange(len(i)), i]
    return idx, dist


def sample_inverse_cdf(cdf, rows, u):
    c = cdf[rows]
    k = (u[:, None] < c).argmax(axis=1)
    # u beyond the last finite breakpoint falls into the last category
    miss = ~(u[:, None] < c).any(axis=1)
    k[miss] = cdf.shape[1] - 1
    return k.astype(np.int64)


def bellman_sweep(stage, nxt, V, beta):
    q = stage + beta * V[nxt]
    greedy = q.argmin(axis=1).astype(np.int64)
    return q[np.arange(q.shape[0]), greedy], greedy


def linear_sa(theta, q, visits, xu, phi, cost, nxt):
    n = q.shape[2]
    for t in range(xu.shape[0]):
        s = xu[t]
        visits[s] += 1
        a = 1.0 / visits[s]
        f = phi[t]
        theta[s] += a * f * (cost[t] - f @ theta[s])
        target = np.zeros(n)
        target[nxt[t]] = 1.0
        q[s] += a * np.outer(f, target - f @ q[s])


def sgd_quadratic(K, H, v0):
    T, d = K.shape
    V = np.empty((T + 1, d))
    G = np.empty(T)
    V[0] = v0
    skk = np.zeros((d, d))
    skh = np.zeros(d)
    shh = 0.0
    for t in range(T):
        k = K[t]
        r = k @ V[t] - H[t]
        with np.errstate(over="ignore", invalid="ignore"):
            V[t + 1] = V[t] - (1.0 / (t + 1)) * 2.0 * k * r
        if not np.all(np.isfinite(V[t + 1])):
            return V, G, t + 1
        skk += np.outer(k, k)
        skh += k * H[t]
        shh += H[t] * H[t]
        v = V[t + 1]
        G[t] = (v @ skk @ v - 2.0 * v @ skh + shh) / (t + 1)
    return V, G, -1
