import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfclin.linfa import (LinearModel, basis_rank, eval_linear_cost, eval_linear_kernel, exact_linear_model,
                          indicator_basis, make_basis, normalize_to_measure, polynomial_basis,
                          random_exact_linear_model, uniform_error_certificate)
from mfclin.model import FiniteMFCModel, crowd_model, random_affine_model
from mfclin.simplex import UsageError, build_grid


def test_zero_coefficients_give_zero():
    b = polynomial_basis(2, 2, 2)
    lm = LinearModel(b, np.zeros((2, 2, b.d)), np.zeros((2, 2, b.d, 2)))
    assert eval_linear_cost(lm, 1, 0, [0.3, 0.7]) == 0.0
    np.testing.assert_array_equal(eval_linear_kernel(lm, 1, 0, [0.3, 0.7]), [0.0, 0.0])


def test_dot_products_against_high_precision():
    rng = np.random.default_rng(0)
    b = polynomial_basis(3, 2, 3)
    theta = rng.normal(size=(3, 2, b.d))
    q = rng.normal(size=(3, 2, b.d, 3))
    lm = LinearModel(b, theta, q)
    mu = rng.dirichlet(np.ones(3))
    mpmath.mp.dps = 40
    # Bernstein features recomputed independently
    from itertools import product
    from math import factorial
    feats = []
    for a in sorted((a for a in product(range(4), repeat=3) if sum(a) == 3), reverse=True):
        c = mpmath.mpf(factorial(3)) / (factorial(a[0]) * factorial(a[1]) * factorial(a[2]))
        feats.append(c * mpmath.fprod(mpmath.mpf(float(m)) ** k for m, k in zip(mu, a)))
    for x in range(3):
        for u in range(2):
            ref = mpmath.fsum(f * mpmath.mpf(float(t)) for f, t in zip(feats, theta[x, u]))
            assert abs(eval_linear_cost(lm, x, u, mu) - float(ref)) < 1e-13
            for y in range(3):
                refk = mpmath.fsum(f * mpmath.mpf(float(t)) for f, t in zip(feats, q[x, u, :, y]))
                assert abs(eval_linear_kernel(lm, x, u, mu)[y] - float(refk)) < 1e-13


@given(st.integers(2, 4), st.integers(1, 3), st.integers(0, 1000))
@settings(max_examples=25, deadline=None)
def test_bernstein_partition_of_unity_and_lipschitz(n, deg, seed):
    b = polynomial_basis(n, 2, deg)
    rng = np.random.default_rng(seed)
    mus = rng.dirichlet(np.ones(n), size=2)
    phi = b.batch(mus)
    np.testing.assert_allclose(phi.sum(1), 1.0, atol=1e-12)
    assert np.all(phi >= 0) and np.all(phi <= 1 + 1e-12)
    tv = 0.5 * np.abs(mus[0] - mus[1]).sum()
    assert np.abs(phi[0] - phi[1]).max() <= b.lipschitz_bound * tv + 1e-12


def test_bernstein_spans_low_degree_polynomials():
    b = polynomial_basis(3, 1, 2)
    grid = build_grid(3, 6)
    assert basis_rank(b, grid) == b.d == 6
    # mu_0 * mu_1 + 0.3 mu_2 is quadratic, so it is in the span
    A = b.batch(grid.representatives)
    y = grid.representatives[:, 0] * grid.representatives[:, 1] + 0.3 * grid.representatives[:, 2]
    coef = np.linalg.lstsq(A, y, rcond=None)[0]
    np.testing.assert_allclose(A @ coef, y, atol=1e-12)


def test_normalize_examples():
    np.testing.assert_array_equal(normalize_to_measure([0.25, 0.75]), [0.25, 0.75])
    np.testing.assert_array_equal(normalize_to_measure([-0.1, 1.1]), [0.0, 1.0])
    np.testing.assert_allclose(normalize_to_measure([0.2, -0.1, 0.5]), [2 / 7, 0.0, 5 / 7])
    np.testing.assert_allclose(normalize_to_measure([-1.0, -2.0]), [0.5, 0.5])


def test_indicator_basis_unit_vectors():
    g = build_grid(3, 3)
    b = indicator_basis(g, 2)
    np.testing.assert_array_equal(b.batch(g.representatives), np.eye(g.size))
    g1 = build_grid(2, 1)
    b1 = indicator_basis(g1)
    np.testing.assert_array_equal(b1.eval(0, 0, [0.9, 0.1]), [1.0, 0.0])


def test_indicator_basis_orthonormal_under_any_covering_measure():
    g = build_grid(2, 4)
    b = indicator_basis(g)
    rng = np.random.default_rng(5)
    x = rng.beta(0.7, 1.3, size=200000)
    phi = b.batch(np.stack([x, 1 - x], 1))
    mass = phi.mean(0)
    assert np.all(mass > 0)
    gram = (phi / np.sqrt(mass)).T @ (phi / np.sqrt(mass)) / len(x)
    np.testing.assert_allclose(gram, np.eye(g.size), atol=1e-12)


def test_indicator_bin_averages_reproduce_bin_average():
    g = build_grid(2, 3)
    b = indicator_basis(g)
    m = crowd_model(2)
    rng = np.random.default_rng(1)
    x = rng.random(500)
    mus = np.stack([x, 1 - x], 1)
    idx, _ = g.project_many(mus)
    theta = np.zeros((2, 2, g.size))
    q = np.zeros((2, 2, g.size, 2))
    for i in range(g.size):
        sel = mus[idx == i]
        theta[:, :, i] = np.mean([m.cost_table(mu) for mu in sel], axis=0)
        q[:, :, i, :] = np.mean([m.kernel_table(mu) for mu in sel], axis=0)
    lm = LinearModel(b, theta, q)
    probe = np.array([0.4, 0.6])
    i = g.project(probe)
    np.testing.assert_allclose(eval_linear_cost(lm, 0, 1, probe), theta[0, 1, i])
    np.testing.assert_allclose(eval_linear_kernel(lm, 0, 1, probe), q[0, 1, i])


def test_make_basis_errors():
    with pytest.raises(UsageError):
        make_basis({"name": "fourier"})
    with pytest.raises(UsageError):
        make_basis({"name": "polynomial", "n_actions": 2})


def test_linear_model_json_roundtrip(tmp_path):
    m = random_exact_linear_model(2, 2, 2, seed=1)
    lm = LinearModel(m.known["basis"], m.known["theta_bar"], m.known["q_bar"])
    lm.save(tmp_path / "lm.json")
    back = LinearModel.load(tmp_path / "lm.json")
    np.testing.assert_array_equal(back.theta, lm.theta)
    np.testing.assert_array_equal(back.q, lm.q)
    np.testing.assert_array_equal(back.cost_table([0.3, 0.7]), lm.cost_table([0.3, 0.7]))


def test_as_model_projects_signed_rows():
    b = polynomial_basis(2, 1, 1)
    q = np.zeros((2, 1, 2, 2))
    q[:, :, :, 0] = -0.2
    q[:, :, :, 1] = 1.2
    lm = LinearModel(b, np.zeros((2, 1, 2)), q)
    np.testing.assert_allclose(lm.as_model().kernel_table([0.5, 0.5]), [[[0.0, 1.0]], [[0.0, 1.0]]])
    assert lm.projection_distance(build_grid(2, 2)) == pytest.approx(0.2)


def test_certificate_for_exact_model_is_zero():
    m = random_exact_linear_model(2, 2, 2, seed=3)
    lm = LinearModel(m.known["basis"], m.known["theta_bar"], m.known["q_bar"])
    cert = uniform_error_certificate(lm, m, build_grid(2, 20), build_grid(2, 10).representatives, 0.1)
    assert cert.measured_cost.max() < 1e-14 and cert.measured_kernel.max() < 1e-14


def test_indicator_fit_within_lipschitz_times_diameter():
    from mfclin.learn import coordinated_least_squares, make_training_set

    m = random_affine_model(2, 2, seed=4)
    g = build_grid(2, 5)
    rng = np.random.default_rng(2)
    x = rng.random(400)
    ts = make_training_set(m, np.stack([x, 1 - x], 1))
    lm, _ = coordinated_least_squares(ts, indicator_basis(g))
    cert = uniform_error_certificate(lm, m, build_grid(2, 200), ts.mus, 0.05)
    assert cert.measured_cost.max() <= m.known["k_c"] * g.diameter + 1e-9
    assert cert.measured_kernel.max() <= m.known["k_f"] * g.diameter + 1e-9


@pytest.mark.parametrize("seed", range(20))
def test_certificate_holds_for_perturbed_linear_models(seed):
    from mfclin.learn import coordinated_least_squares, make_training_set

    rng = np.random.default_rng(seed)
    base = random_exact_linear_model(2, 2, 1, seed=seed)
    basis = base.known["basis"]
    eps = 0.02
    s = rng.uniform(-1, 1, (2, 2))
    R = rng.dirichlet(np.ones(2), (2, 2))
    freq = rng.uniform(3, 9)

    def cost(mu):
        return base.cost_table(mu) + eps * np.sin(freq * mu[0]) * s

    def kernel(mu):
        w = eps * 0.5 * (1 + np.sin(freq * mu[0]))
        return (1 - w) * base.kernel_table(mu) + w * R

    m = FiniteMFCModel(2, 2, kernel, cost, "perturbed-linear")
    x = rng.random(300)
    ts = make_training_set(m, np.stack([x, 1 - x], 1))
    lm, _ = coordinated_least_squares(ts, basis)
    cert = uniform_error_certificate(lm, m, build_grid(2, 100), ts.mus, 0.1,
                                     reference=(base.known["theta_bar"], base.known["q_bar"], eps))
    assert cert.pointwise_ok
    assert np.all(cert.measured_cost <= cert.bound_cost + 1e-12)
    assert np.all(cert.measured_kernel <= cert.bound_kernel + 1e-12)
    assert cert.label == "proof-derived constant"


def test_exact_linear_model_requires_matching_shapes():
    b = polynomial_basis(2, 2, 1)
    with pytest.raises(UsageError):
        exact_linear_model(b, np.zeros((2, 2, 3)), np.zeros((2, 2, 2, 2)))
