import itertools
from math import comb

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mfclin.simplex import (UsageError, as_measure, build_grid, covering_radius, dirac, empirical_from_states,
                            lattice_points, measure_from_json, measure_to_json, optimal_coupling, tv_distance,
                            uniform, wasserstein1_discrete)


def measures(n):
    return arrays(np.float64, n, elements=st.floats(0.0, 1.0)).filter(lambda w: w.sum() > 1e-3).map(
        lambda w: w / w.sum())


@given(st.integers(2, 6).flatmap(lambda n: st.tuples(measures(n), measures(n), measures(n))))
def test_tv_is_a_metric(triple):
    a, b, c = triple
    assert tv_distance(a, a) == 0.0
    assert tv_distance(a, b) == tv_distance(b, a)
    assert tv_distance(a, c) <= tv_distance(a, b) + tv_distance(b, c) + 1e-15
    assert 0.0 <= tv_distance(a, b) <= 1.0 + 1e-15


@given(st.integers(2, 6).flatmap(lambda n: st.tuples(measures(n), measures(n))))
def test_w1_equals_tv_bitwise(pair):
    a, b = pair
    assert wasserstein1_discrete(a, b) == tv_distance(a, b)


@given(st.integers(2, 6).flatmap(lambda n: st.tuples(measures(n), measures(n))))
def test_optimal_coupling_marginals_and_cost(pair):
    a, b = pair
    plan = optimal_coupling(a, b)
    assert np.all(plan >= 0)
    np.testing.assert_allclose(plan.sum(1), a, atol=1e-12)
    np.testing.assert_allclose(plan.sum(0), b, atol=1e-12)
    off = plan.sum() - np.trace(plan)
    assert abs(off - tv_distance(a, b)) < 1e-12


def test_tv_of_point_masses():
    assert tv_distance(dirac(3, 0), dirac(3, 2)) == 1.0
    assert tv_distance([0.5, 0.5], [1.0, 0.0]) == 0.5


def test_tv_dimension_mismatch():
    with pytest.raises(UsageError):
        tv_distance([1.0, 0.0], [1.0, 0.0, 0.0])


def test_as_measure_validation():
    with pytest.raises(UsageError):
        as_measure([1.1, -0.1])
    with pytest.raises(UsageError):
        as_measure([0.5, 0.6])
    with pytest.raises(UsageError):
        as_measure([np.nan, 1.0])
    w = as_measure([0.5, 0.5 + 1e-10])
    assert w.sum() == pytest.approx(1.0, abs=1e-15)
    assert not w.flags.writeable


def test_empirical_measure():
    np.testing.assert_array_equal(empirical_from_states(np.array([0, 1, 1, 2]), 3), [0.25, 0.5, 0.25])
    with pytest.raises(UsageError):
        empirical_from_states(np.array([0, 3]), 3)
    with pytest.raises(UsageError):
        empirical_from_states(np.array([], dtype=int), 3)


@pytest.mark.parametrize("n,m", [(2, 1), (2, 5), (3, 4), (4, 3)])
def test_lattice_points_enumerate_the_lattice(n, m):
    pts = lattice_points(n, m)
    assert len(pts) == comb(m + n - 1, n - 1)
    brute = sorted((p for p in itertools.product(range(m + 1), repeat=n) if sum(p) == m), reverse=True)
    assert [tuple(p) for p in pts] == brute
    assert tuple(pts[0]) == (m,) + (0,) * (n - 1)


def test_grid_sizes_and_first_point():
    g = build_grid(3, 4)
    assert g.size == 15
    np.testing.assert_array_equal(g.representatives[0], [1.0, 0.0, 0.0])
    assert build_grid(2, 1).size == 2


def test_build_grid_rejects_bad_resolution():
    with pytest.raises(UsageError):
        build_grid(2, 0)


@pytest.mark.parametrize("n,m", [(2, 4), (3, 3), (3, 5), (4, 2)])
def test_covering_radius_against_dense_search(n, m):
    # oracle: the worst-case point has equal fractional parts k/n above a lattice point
    g = build_grid(n, m)
    rng = np.random.default_rng(0)
    pts = rng.dirichlet(np.ones(n), size=20000)
    k = n // 2
    base = np.zeros(n)
    base[0] = m - k
    worst = (base + np.array([k / n] * n)) / m
    pts = np.vstack([pts, worst])
    _, dist = g.project_many(pts)
    rho = covering_radius(n, m)
    assert dist.max() <= rho + 1e-12
    assert dist[-1] == pytest.approx(rho, abs=1e-12)


def test_two_state_cell_diameter_is_attained():
    g = build_grid(2, 5)
    xs = np.linspace(0, 1, 100001)
    idx, _ = g.project_many(np.stack([xs, 1 - xs], 1))
    widest = max(xs[idx == i].max() - xs[idx == i].min() for i in range(g.size))
    assert widest <= g.diameter + 1e-12
    assert widest == pytest.approx(g.diameter, abs=1e-4)


@given(st.integers(2, 5), st.integers(1, 6))
@settings(max_examples=30)
def test_diameter_upper_bound(n, m):
    assert build_grid(n, m).diameter <= (n - 1) / m + 1e-15


def test_projection_fixes_representatives_and_breaks_ties_low():
    g = build_grid(3, 4)
    for i, r in enumerate(g.representatives):
        assert g.project(r) == i
    g2 = build_grid(2, 2)
    assert g2.project([0.75, 0.25]) == 0  # equidistant from (1,0) and (1/2,1/2)


def test_grid_and_measure_json_roundtrip():
    g = build_grid(3, 4)
    assert type(g).from_json(g.to_json()).representatives.tolist() == g.representatives.tolist()
    mu = uniform(3)
    np.testing.assert_array_equal(measure_from_json(measure_to_json(mu)), mu)
