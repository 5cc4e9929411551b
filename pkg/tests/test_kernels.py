"""Both backends against small loop oracles and against each other."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfclin import kernels

BACKENDS = sorted(kernels.BACKENDS)


def test_compiled_backend_is_built():
    assert "compiled" in kernels.BACKENDS, "extension failed to build; only the fallback is available"


def _nearest_oracle(points, reps):
    out = []
    for p in points:
        d = [0.5 * sum(abs(a - b) for a, b in zip(p, r)) for r in reps]
        best = min(range(len(reps)), key=lambda i: (d[i], i))
        out.append((best, d[best]))
    return out


@pytest.mark.parametrize("backend", BACKENDS)
@given(seed=st.integers(0, 10**6))
@settings(max_examples=25, deadline=None)
def test_nearest_rep(backend, seed):
    rng = np.random.default_rng(seed)
    pts = rng.dirichlet(np.ones(3), size=7)
    reps = rng.dirichlet(np.ones(3), size=5)
    reps[3] = reps[1]  # duplicate: the lower index must win
    idx, dist = kernels.nearest_rep(pts, reps, backend=backend)
    for (i, d), j, e in zip(_nearest_oracle(pts, reps), idx, dist):
        assert i == j
        assert abs(d - e) < 1e-15


@pytest.mark.parametrize("backend", BACKENDS)
def test_sample_inverse_cdf(backend):
    cdf = np.array([[0.2, 0.5, 1.0], [0.0, 0.0, 1.0], [1.0, 1.0, 1.0]])
    rows = np.array([0, 0, 0, 0, 1, 2, 2])
    u = np.array([0.0, 0.2, 0.49, 0.99999, 0.3, 0.0, 0.999])
    np.testing.assert_array_equal(kernels.sample_inverse_cdf(cdf, rows, u, backend=backend),
                                  [0, 1, 1, 2, 2, 0, 0])


@pytest.mark.parametrize("backend", BACKENDS)
def test_sample_inverse_cdf_matches_searchsorted(backend):
    rng = np.random.default_rng(1)
    p = rng.dirichlet(np.ones(4), size=6)
    cdf = np.cumsum(p, 1)
    cdf[:, -1] = 1.0
    rows = rng.integers(0, 6, 5000)
    u = rng.random(5000)
    ref = np.array([np.searchsorted(cdf[r], x, side="right") for r, x in zip(rows, u)])
    np.testing.assert_array_equal(kernels.sample_inverse_cdf(cdf, rows, u, backend=backend), ref)


@pytest.mark.parametrize("backend", BACKENDS)
def test_bellman_sweep(backend):
    rng = np.random.default_rng(2)
    stage = rng.random((6, 4))
    stage[2, 3] = stage[2, 1]  # tie
    nxt = rng.integers(0, 6, (6, 4))
    nxt[2, 3] = nxt[2, 1]
    V = rng.random(6)
    Vn, g = kernels.bellman_sweep(stage, nxt, V, 0.7, backend=backend)
    for i in range(6):
        q = [stage[i, c] + 0.7 * V[nxt[i, c]] for c in range(4)]
        best = min(range(4), key=lambda c: (q[c], c))
        assert g[i] == best and Vn[i] == q[best]


def _sa_oracle(theta, q, visits, xu, phi, cost, nxt):
    theta, q, visits = theta.copy(), q.copy(), visits.copy()
    n = q.shape[2]
    for s, f, c, j in zip(xu, phi, cost, nxt):
        visits[s] += 1
        a = 1.0 / visits[s]
        pred = sum(f[i] * theta[s, i] for i in range(len(f)))
        for i in range(len(f)):
            theta[s, i] += a * f[i] * (c - pred)
        for y in range(n):
            py = sum(f[i] * q[s, i, y] for i in range(len(f)))
            for i in range(len(f)):
                q[s, i, y] += a * f[i] * ((1.0 if y == j else 0.0) - py)
    return theta, q, visits


@pytest.mark.parametrize("backend", BACKENDS)
def test_linear_sa_against_loop(backend):
    rng = np.random.default_rng(3)
    S, d, n, T = 4, 3, 2, 200
    theta = np.zeros((S, d))
    q = np.zeros((S, d, n))
    visits = np.zeros(S, dtype=np.int64)
    xu = rng.integers(0, S, T)
    phi = rng.random((T, d))
    cost = rng.random(T)
    nxt = rng.integers(0, n, T)
    ref = _sa_oracle(theta, q, visits, xu, phi, cost, nxt)
    kernels.linear_sa(theta, q, visits, xu, phi, cost, nxt, backend=backend)
    np.testing.assert_allclose(theta, ref[0], rtol=0, atol=1e-12)
    np.testing.assert_allclose(q, ref[1], rtol=0, atol=1e-12)
    np.testing.assert_array_equal(visits, ref[2])


def test_linear_sa_first_visit_is_exact_average():
    # alpha = 1 on the first visit, 1/2 on the second: a running mean for indicator features
    theta = np.zeros((1, 1))
    q = np.zeros((1, 1, 2))
    visits = np.zeros(1, dtype=np.int64)
    kernels.linear_sa(theta, q, visits, np.array([0, 0, 0]), np.ones((3, 1)), np.array([3.0, 5.0, 7.0]),
                      np.array([0, 1, 1]))
    assert theta[0, 0] == pytest.approx(5.0)
    np.testing.assert_allclose(q[0, 0], [1 / 3, 2 / 3])


def test_linear_sa_rejects_wrong_state_dtype():
    with pytest.raises(TypeError):
        kernels.linear_sa(np.zeros((1, 1), dtype=np.float32), np.zeros((1, 1, 2)), np.zeros(1, dtype=np.int64),
                          np.array([0]), np.ones((1, 1)), np.ones(1), np.array([0]))


@pytest.mark.parametrize("backend", BACKENDS)
def test_sgd_quadratic_against_loop(backend):
    rng = np.random.default_rng(4)
    T, d = 300, 2
    K = rng.random((T, d))
    H = rng.random(T)
    V, G, bad = kernels.sgd_quadratic(K, H, np.zeros(d), backend=backend)
    assert bad == -1
    v = np.zeros(d)
    for t in range(T):
        v = v - (2.0 / (t + 1)) * K[t] * (K[t] @ v - H[t])
        obj = np.mean((K[: t + 1] @ v - H[: t + 1]) ** 2)
        assert abs(G[t] - obj) < 1e-10
    np.testing.assert_allclose(V[-1], v, atol=1e-12)


@pytest.mark.parametrize("backend", BACKENDS)
def test_sgd_quadratic_reports_divergence(backend):
    K = np.full((5, 1), 1e200)
    _, _, bad = kernels.sgd_quadratic(K, np.ones(5), np.ones(1), backend=backend)
    assert bad == 1


@given(seed=st.integers(0, 10**6))
@settings(max_examples=10, deadline=None)
def test_backends_agree(seed):
    if len(BACKENDS) < 2:
        pytest.skip("single backend")
    rng = np.random.default_rng(seed)
    pts, reps = rng.dirichlet(np.ones(4), 50), rng.dirichlet(np.ones(4), 9)
    a = kernels.nearest_rep(pts, reps, backend="compiled")
    b = kernels.nearest_rep(pts, reps, backend="python")
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    stage, nxt, V = rng.random((9, 5)), rng.integers(0, 9, (9, 5)), rng.random(9)
    a = kernels.bellman_sweep(stage, nxt, V, 0.9, backend="compiled")
    b = kernels.bellman_sweep(stage, nxt, V, 0.9, backend="python")
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    K, H = rng.random((100, 3)), rng.random(100)
    a = kernels.sgd_quadratic(K, H, np.zeros(3), backend="compiled")
    b = kernels.sgd_quadratic(K, H, np.zeros(3), backend="python")
    np.testing.assert_allclose(a[0], b[0], rtol=1e-12, atol=1e-14)


def test_fallback_selected_by_environment(monkeypatch):
    import importlib

    monkeypatch.setenv("MFCLIN_BACKEND", "python")
    mod = importlib.reload(kernels)
    try:
        assert mod.BACKEND == "python"
    finally:
        monkeypatch.delenv("MFCLIN_BACKEND")
        importlib.reload(kernels)
