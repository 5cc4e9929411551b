import math

import numpy as np
import pytest

from mfclin.evaluate import (Scenario, bound_closed_finite, bound_closed_infinite, bound_finite_vs_infinite_value,
                             bound_open_finite, bound_open_infinite, bound_value_mismatch, estimate_MN, exact_MN,
                             flow_divergence_bound, population_from_measure, reproduce_decentralization_example,
                             run_closed_loop_finite, run_closed_loop_infinite, run_open_loop_finite,
                             run_open_loop_infinite, sup_MN, verify_gap_le_bound, verify_negative_control)
from mfclin.model import (BoundInapplicable, constant_model, crowd_model, decentralization_model, estimate_constants,
                          identity_model, perturbed_model, random_affine_model, uniform_mismatch)
from mfclin.population import CapacityError, dirac_policy
from mfclin.simplex import UsageError, build_grid

HALF = np.array([0.5, 0.5])
UNIFORM_ACTIONS = np.full((2, 2), 0.5)


# ----------------------------------------------------------- executions

def test_zero_cost_runs():
    m = identity_model(2, 2, 0.0)
    assert run_closed_loop_infinite(m, UNIFORM_ACTIONS, HALF, 0.9, 50).cost == 0.0
    assert run_open_loop_infinite(m, m, UNIFORM_ACTIONS, HALF, 0.9, 50).cost == 0.0
    pop = population_from_measure(HALF, 4)
    assert run_closed_loop_finite(m, 4, UNIFORM_ACTIONS, pop, 0.9, 20, reps=3).mean == 0.0
    assert run_open_loop_finite(m, 4, m, UNIFORM_ACTIONS, pop, 0.9, 20, reps=3).mean == 0.0


def test_open_loop_with_true_model_matches_closed_loop():
    m = random_affine_model(2, 2, seed=4)
    pol = lambda mu: dirac_policy(2, 2, int(mu[0] > 0.5))  # noqa: E731
    a = run_closed_loop_infinite(m, pol, [0.3, 0.7], 0.7, 60)
    b = run_open_loop_infinite(m, m, pol, [0.3, 0.7], 0.7, 60)
    assert a.cost == b.cost
    np.testing.assert_array_equal(b.divergence, 0.0)


def test_constant_kernels_diverge_by_one_step_term():
    nu, nu_hat = [0.2, 0.8], [0.5, 0.5]
    run = run_open_loop_infinite(constant_model(nu), constant_model(nu_hat), UNIFORM_ACTIONS, [1.0, 0.0], 0.5, 8)
    assert run.divergence[0] == 0.0
    np.testing.assert_allclose(run.divergence[1:], 0.3, atol=1e-15)


@pytest.mark.parametrize("seed", range(3))
def test_flow_divergence_within_formula(seed):
    true = random_affine_model(2, 2, seed=seed, mix=0.3)
    hat = perturbed_model(true, 0.05, 0.1, seed=seed)
    g = build_grid(2, 16)
    c = estimate_constants(true, g)
    lam = uniform_mismatch(true, hat, g)
    pol = lambda mu: dirac_policy(2, 2, int(mu[0] < 0.4))  # noqa: E731
    run = run_open_loop_infinite(true, hat, pol, [0.8, 0.2], 0.5, 10)
    for t, d in enumerate(run.divergence):
        assert d <= flow_divergence_bound(lam, c.delta_t, c.k_f, 0.0, t) + 1e-12


def test_tail_closure_is_exact():
    run = run_closed_loop_infinite(identity_model(2, 2, 1.0), UNIFORM_ACTIONS, HALF, 0.9, 5)
    assert run.closed_form_tail and run.truncation_bound == 0.0
    assert run.cost == pytest.approx(10.0, abs=1e-12)


def test_single_agent_reduction():
    # N=1, constant kernel: a plain two-state MDP under a fixed policy; exact value by linear solve
    nu = np.array([0.3, 0.7])
    m = crowd_model(2)  # cost depends on the agent's own point mass when N=1
    m1 = constant_model(nu, 2)
    from mfclin.model import FiniteMFCModel

    model = FiniteMFCModel(2, 2, m1.kernel_fn, m.cost_fn, "const-kernel")
    pol = np.array([[0.6, 0.4], [0.1, 0.9]])
    beta = 0.8
    c = np.array([pol[x] @ m.cost_table(np.eye(2)[x])[x] for x in range(2)])
    P = np.tile(nu, (2, 1))
    v = np.linalg.solve(np.eye(2) - beta * P, c)
    res = run_closed_loop_finite(model, 1, pol, np.array([0]), beta, 60, seed=1, reps=2000, c_sup=1.2)
    assert abs(res.mean - v[0]) <= 3 * res.stderr + res.truncation_bound


def test_coordinated_uniform_split_costs_nothing_at_scale():
    m = decentralization_model()
    pop = population_from_measure(HALF, 1000)
    res = run_closed_loop_finite(m, 1000, UNIFORM_ACTIONS, pop, 0.9, 40, reps=5, coordination="quota")
    assert res.mean < 0.5


def test_uncoordinated_mixture_costs_ninety_at_scale():
    m = decentralization_model()
    mix = 0.5 * UNIFORM_ACTIONS + 0.5 * dirac_policy(2, 2, 0)
    pop = population_from_measure(HALF, 1000)
    res = run_open_loop_finite(m, 1000, m, mix, pop, 0.9, 150, reps=5, c_sup=10.0)
    assert abs(res.mean - 90.0) <= 0.05 * 90.0


def test_finite_gap_to_infinite_value_shrinks():
    m = crowd_model(2)
    pol = np.array([[0.8, 0.2], [0.3, 0.7]])
    beta = 0.6
    inf = run_closed_loop_infinite(m, pol, HALF, beta, 60).cost
    gaps = []
    for N in (10, 100, 1000):
        res = run_open_loop_finite(m, N, m, pol, population_from_measure(HALF, N), beta, 30, seed=2, reps=200)
        gaps.append(abs(res.mean - inf))
    assert gaps[0] > gaps[1] > gaps[2]


def test_open_loop_finite_tracking():
    m = crowd_model(2)
    res, dev, mu_hat = run_open_loop_finite(m, 50, m, UNIFORM_ACTIONS, population_from_measure(HALF, 50), 0.5, 5,
                                            reps=10, track=True)
    assert dev.shape == (10, 6) and mu_hat.shape == (6, 2)
    assert np.all(dev[:, 0] == 0.0)


def test_population_from_measure():
    assert population_from_measure([0.25, 0.75], 4).tolist() == [0, 1, 1, 1]
    with pytest.raises(UsageError):
        population_from_measure([0.3, 0.7], 4)


# ------------------------------------------------------------------ M_N

def test_mn_point_mass_is_zero():
    for N in (1, 5, 50):
        assert exact_MN([0.0, 1.0, 0.0], min(N, 5)) == 0.0
        assert estimate_MN([1.0, 0.0], N, 100)[0] == 0.0


def test_exact_mn_uniform_pair():
    assert exact_MN([0.5, 0.5], 2) == 0.25


def test_exact_mn_against_binomial_sum():
    from math import comb

    p, N = 0.3, 7
    ref = sum(comb(N, k) * p**k * (1 - p) ** (N - k) * abs(k / N - p) for k in range(N + 1))
    assert exact_MN([p, 1 - p], N) == pytest.approx(ref, abs=1e-15)


def test_exact_mn_cap():
    with pytest.raises(CapacityError):
        exact_MN([0.5, 0.5], 30)


def test_estimate_matches_exact():
    m, se = estimate_MN([0.5, 0.5], 10, 20000, seed=1)
    assert abs(m - exact_MN([0.5, 0.5], 10)) <= 4 * se


def test_mn_scaling():
    Ns = np.array([25, 100, 400])
    est = np.array([estimate_MN([0.5, 0.5], int(N), 4000, seed=3)[0] for N in Ns])
    slope, icpt = np.polyfit(np.log(Ns), np.log(est), 1)
    pred = slope * np.log(Ns) + icpt
    r2 = 1 - np.sum((np.log(est) - pred) ** 2) / np.sum((np.log(est) - np.log(est).mean()) ** 2)
    assert abs(slope + 0.5) < 0.1 and r2 > 0.95


def test_sup_mn_dominates_a_point():
    assert sup_MN(2, 20, 2000)[0] >= estimate_MN([1.0, 0.0], 20, 2000)[0]


# --------------------------------------------------------------- bounds

def test_bound_arithmetic():
    assert bound_closed_infinite(0.0, 2, 1, 0.5) == 0.0
    assert bound_closed_infinite(0.1, 2, 1, 0.5) == pytest.approx(2.4)
    assert bound_closed_infinite(0.2, 2, 1, 0.5) == pytest.approx(2 * bound_closed_infinite(0.1, 2, 1, 0.5))
    assert bound_open_infinite(0.0, 2, 1, 0.5) == 0.0
    assert bound_open_infinite(0.1, 2, 1, 0.5) == pytest.approx(1.2)
    assert bound_value_mismatch(0.0, 2, 1, 0.5) == 0.0
    assert bound_open_finite(0.0, 2, 1, 0.5, 0.0) == 0.0
    assert bound_closed_finite(0.0, 2, 1, 0.5, 0.0) == 0.0
    assert bound_open_finite(0.0, 2, 1, 0.5, 0.1) == pytest.approx(1.6)
    assert bound_closed_finite(0.0, 2, 1, 0.5, 0.1) == pytest.approx(1.6)
    assert bound_finite_vs_infinite_value(2, 1, 0.5, 0.0) == 0.0
    assert bound_finite_vs_infinite_value(2, 1, 0.5, 0.25) == pytest.approx(2.0)


def test_value_mismatch_identity():
    # lam (bC - bK + 1) / ((1-b)(1-bK)) is half the closed-loop bound times (1 - beta);
    # at lam=0.1, beta=0.5, C=2, K=1 both sides equal 0.6
    rng = np.random.default_rng(0)
    for _ in range(50):
        lam, C, K, b = rng.random(), 3 * rng.random(), rng.random(), rng.uniform(0.05, 0.95)
        assert bound_value_mismatch(lam, C, K, b) == pytest.approx(0.5 * bound_closed_infinite(lam, C, K, b) * (1 - b))
    assert bound_value_mismatch(0.1, 2, 1, 0.5) == pytest.approx(0.6)


def test_open_bound_below_closed_bound_on_gallery():
    for seed in range(10):
        m = random_affine_model(2, 2, seed=seed, mix=0.3)
        c = estimate_constants(m, build_grid(2, 8))
        for beta in (0.5, 0.6, 0.7):
            if beta * c.k_const >= 1:
                continue
            assert bound_open_infinite(0.1, c.c_const, c.k_const, beta) <= bound_closed_infinite(
                0.1, c.c_const, c.k_const, beta)


def test_finite_bounds_tend_to_infinite_ones():
    for m_n in (1e-3, 1e-6, 1e-9):
        assert bound_open_finite(0.1, 2, 1, 0.5, m_n) - 0.1 * 2 * 1.5 / 0.25 < 20 * m_n
    assert bound_closed_finite(0.1, 2, 1, 0.5, 0.0) == pytest.approx(bound_closed_infinite(0.1, 2, 1, 0.5))


def test_bounds_refuse_non_contraction():
    with pytest.raises(BoundInapplicable):
        bound_closed_infinite(0.1, 2, 2.5, 0.5)
    with pytest.raises(UsageError):
        bound_open_infinite(0.1, 2, 1, 1.0)


def test_flow_divergence_bound_trivia():
    assert flow_divergence_bound(0.3, 0.5, 0.2, 0.1, 0) == 0.0
    assert flow_divergence_bound(0.0, 0.5, 0.2, 0.0, 7) == 0.0
    assert flow_divergence_bound(0.1, 0.5, 0.5, 0.0, 3) == pytest.approx(0.3)


# ---------------------------------------------------------- verification

def test_true_model_scenario_has_small_gap():
    m = crowd_model(2)
    rep = verify_gap_le_bound(Scenario("self", m, m, "closed", 0.5, HALF, resolution=32))
    assert rep.bound == 0.0 and rep.verdict
    assert abs(rep.gap) <= rep.addenda["discretization"]


def test_mismatched_closed_loop_scenario_holds():
    m = random_affine_model(2, 2, seed=2, mix=0.3)
    rep = verify_gap_le_bound(Scenario("mismatch", m, perturbed_model(m, 0.1, 0.1, seed=0), "closed", 0.5, HALF))
    assert rep.verdict and rep.bound > 0
    js = rep.to_json()
    assert "<=" in js["inequality"] and js["threshold"] >= js["bound"]


def test_finite_scenario_reports_composite_reference():
    m = crowd_model(2)
    rep = verify_gap_le_bound(Scenario("fin", m, m, "open", 0.5, HALF, N=50, reps=50, mn_reps=500))
    assert rep.reference_kind == "composite" and "monte_carlo" in rep.addenda
    assert rep.verdict


def test_negative_control_fails():
    rep = verify_negative_control(0.9)
    assert rep.gap == pytest.approx(90.0) and not rep.verdict and not rep.expect


def test_forced_bound_scenario_fails():
    m = decentralization_model()
    sc = Scenario("forced", m, m, "closed", 0.5, HALF, force_bound=0.0, expect=False)
    rep = verify_gap_le_bound(sc)
    assert rep.addenda["discretization"] == 0.0


def test_non_contracting_scenario_is_rejected():
    m = random_affine_model(2, 2, seed=0, mix=1.0)
    with pytest.raises(BoundInapplicable):
        verify_gap_le_bound(Scenario("bad", m, m, "closed", 0.95, HALF))


# --------------------------------------------------------------- example

@pytest.mark.parametrize("beta,mix", [(0.9, 90.0), (0.5, 10.0)])
def test_decentralization_example(beta, mix):
    a, b, c = reproduce_decentralization_example(beta)
    assert abs(a) < 1e-9 and abs(b) < 1e-9
    assert c == pytest.approx(mix, abs=1e-6)


def test_decentralization_example_small_beta():
    for beta in (1e-2, 1e-4, 1e-6):
        assert reproduce_decentralization_example(beta)[2] == pytest.approx(10 * beta / (1 - beta), rel=1e-9)
    assert math.isclose(reproduce_decentralization_example(1e-9)[2], 0.0, abs_tol=1e-7)
