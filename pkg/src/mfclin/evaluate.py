"""Executing planned policies against true dynamics, empirical-measure
constants, the performance-loss bounds, and gap-versus-bound verification."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import BoundInapplicable, FiniteMFCModel, ModelConstants, decentralization_model, \
    estimate_constants, uniform_mismatch
from .plan import (PlanResult, candidate_set, execution_addendum, measured_value_lipschitz,
                   value_iteration)
from .population import (CapacityError, Policy, RolloutResult, dirac_policy, mean_field_step,
                         policy_matrix, stage_cost_infinite, step_finite, summarize, truncation_bound,
                         truncation_horizon)
from .rng import make_rng
from .simplex import SimplexGrid, UsageError, as_measure, build_grid, lattice_points


# ----------------------------------------------------- infinite population

@dataclass
class FlowRun:
    cost: float
    trajectory: np.ndarray  # the flow the cost was accumulated along
    truncation_bound: float
    closed_form_tail: bool
    predicted: Optional[np.ndarray] = None  # open loop: the agents' model flow

    @property
    def divergence(self) -> np.ndarray:
        """tv(mu'_t, mu_hat_t) per t (open loop only)."""
        if self.predicted is None:
            raise ValueError("closed-loop run has no predicted flow")
        n = min(len(self.predicted), len(self.trajectory))
        return 0.5 * np.abs(self.trajectory[:n] - self.predicted[:n]).sum(1)


def _run_flow(model_true, model_hat, policy, mu0, beta, horizon, c_sup):
    mu = as_measure(mu0).copy()
    mu_hat = mu.copy() if model_hat is not None else None
    traj, pred = [mu], ([mu_hat] if model_hat is not None else None)
    total, disc = 0.0, 1.0
    closed = False
    for t in range(horizon):
        gamma = policy_matrix(policy, mu if model_hat is None else mu_hat)
        c = stage_cost_infinite(model_true, mu, gamma)
        total += disc * c
        disc *= beta
        nmu = mean_field_step(model_true, mu, gamma)
        if model_hat is not None:
            nhat = mean_field_step(model_hat, mu_hat, gamma)
            fixed = np.array_equal(nmu, mu) and np.array_equal(nhat, mu_hat)
            mu_hat = nhat
            pred.append(mu_hat)
        else:
            fixed = np.array_equal(nmu, mu)
        mu = nmu
        traj.append(mu)
        if fixed:
            # the state (and hence the action) repeats forever: the tail is a
            # geometric series of the current stage cost
            total += disc * c / (1 - beta)
            closed = True
            break
    trunc = 0.0 if closed else (truncation_bound(beta, c_sup, horizon) if c_sup is not None else float("nan"))
    return FlowRun(total, np.array(traj), trunc, closed, None if pred is None else np.array(pred))


def run_closed_loop_infinite(model_true: FiniteMFCModel, policy: Policy, mu0, beta: float, horizon: int,
                             c_sup: Optional[float] = None) -> FlowRun:
    """Discounted cost along the exact flow, the policy looking at the true mu_t."""
    return _run_flow(model_true, None, policy, mu0, beta, horizon, c_sup)


def run_open_loop_infinite(model_true: FiniteMFCModel, model_hat: FiniteMFCModel, policy: Policy, mu0,
                           beta: float, horizon: int, c_sup: Optional[float] = None) -> FlowRun:
    """Agents predict mu_hat_t with their model and act on it; the population
    actually follows mu'_t under the true model. Cost is paid along mu'_t."""
    return _run_flow(model_true, model_hat, policy, mu0, beta, horizon, c_sup)


# --------------------------------------------------------- finite population

def population_from_measure(mu, N: int) -> np.ndarray:
    """Sorted agent states whose empirical measure is mu; N mu must be integral."""
    mu = as_measure(mu)
    counts = mu * N
    if not np.allclose(counts, np.round(counts), atol=1e-9):
        raise UsageError(f"N * mu = {counts} is not integral")
    return np.repeat(np.arange(mu.size), np.round(counts).astype(np.int64))


def run_closed_loop_finite(model_true: FiniteMFCModel, N: int, policy: Policy, pop0, beta: float,
                           horizon: int, seed: int = 0, reps: int = 100, c_sup: Optional[float] = None,
                           coordination: str = "independent") -> RolloutResult:
    """Every agent applies policy(mu^N_t) to its own state."""
    pop0 = np.asarray(pop0, dtype=np.int64)
    if pop0.size != N:
        raise UsageError("initial population has the wrong size")
    costs = np.empty(reps)
    for r in range(reps):
        rng = make_rng(seed, "closed-finite", r)
        x = pop0.copy()
        total, disc = 0.0, 1.0
        for _ in range(horizon):
            x, _, c = step_finite(model_true, x, policy, rng, coordination)
            total += disc * c
            disc *= beta
        costs[r] = total
    trunc = truncation_bound(beta, c_sup, horizon) if c_sup is not None else float("nan")
    return summarize(costs, horizon, trunc)


def run_open_loop_finite(model_true: FiniteMFCModel, N: int, model_hat: FiniteMFCModel, policy: Policy,
                         pop0, beta: float, horizon: int, seed: int = 0, reps: int = 100,
                         c_sup: Optional[float] = None, coordination: str = "independent",
                         track: bool = False):
    """Agents act on the predicted flow mu_hat_t (computed once under
    ``model_hat``) instead of the realized empirical measure.

    With ``track=True`` also returns the (reps, horizon + 1) array of
    tv(mu^N_t, mu_hat_t).
    """
    pop0 = np.asarray(pop0, dtype=np.int64)
    if pop0.size != N:
        raise UsageError("initial population has the wrong size")
    n = model_true.n_states
    mu_hat = np.empty((horizon + 1, n))
    mu_hat[0] = np.bincount(pop0, minlength=n) / N
    gammas = []
    for t in range(horizon):
        g = policy_matrix(policy, mu_hat[t])
        gammas.append(g)
        mu_hat[t + 1] = mean_field_step(model_hat, mu_hat[t], g)
    costs = np.empty(reps)
    dev = np.empty((reps, horizon + 1)) if track else None
    for r in range(reps):
        rng = make_rng(seed, "open-finite", r)
        x = pop0.copy()
        total, disc = 0.0, 1.0
        for t in range(horizon):
            if track:
                dev[r, t] = 0.5 * np.abs(np.bincount(x, minlength=n) / N - mu_hat[t]).sum()
            x, _, c = step_finite(model_true, x, gammas[t], rng, coordination)
            total += disc * c
            disc *= beta
        if track:
            dev[r, horizon] = 0.5 * np.abs(np.bincount(x, minlength=n) / N - mu_hat[horizon]).sum()
        costs[r] = total
    trunc = truncation_bound(beta, c_sup, horizon) if c_sup is not None else float("nan")
    res = summarize(costs, horizon, trunc)
    return (res, dev, mu_hat) if track else res


# ------------------------------------------------------------------- M_N

def estimate_MN(mu, N: int, reps: int, seed: int = 0) -> tuple[float, float]:
    """Monte Carlo E tv(mu^N, mu) with its standard error."""
    mu = as_measure(mu)
    rng = make_rng(seed, "MN", N)
    draws = rng.multinomial(N, mu, size=reps) / N
    d = 0.5 * np.abs(draws - mu).sum(1)
    return float(d.mean()), float(d.std(ddof=1) / math.sqrt(reps)) if reps > 1 else 0.0


def exact_MN(mu, N: int, cap: int = 10**6) -> float:
    """E tv(mu^N, mu) by enumerating all count vectors (guarded by |X|^N <= cap)."""
    mu = as_measure(mu)
    n = mu.size
    if n**N > cap:
        raise CapacityError(f"|X|^N = {n}^{N} exceeds cap {cap}")
    total = 0.0
    fN = math.factorial(N)
    for counts in lattice_points(n, N):
        coef = fN // math.prod(math.factorial(int(c)) for c in counts)
        p = coef * math.prod(float(m) ** int(c) for m, c in zip(mu, counts))
        if p == 0.0:
            continue
        total += p * 0.5 * float(np.abs(counts / N - mu).sum())
    return total


def sup_MN(n: int, N: int, reps: int, seed: int = 0, resolution: int = 4) -> tuple[float, float]:
    """max over grid representatives of estimate_MN, with the stderr at the maximizer."""
    grid = build_grid(n, resolution)
    best = (0.0, 0.0)
    for i, mu in enumerate(grid.representatives):
        m, se = estimate_MN(mu, N, reps, seed=seed + i)
        if m > best[0]:
            best = (m, se)
    return best


def empirical_constants(n_states: int, n_actions: int, N: int, reps: int, seed: int = 0,
                        resolution: int = 4) -> dict:
    """M_N over P(X) and the joint-measure analogue over P(X x U)."""
    m, se = sup_MN(n_states, N, reps, seed, resolution)
    mb, seb = sup_MN(n_states * n_actions, N, reps, seed + 10_000, resolution)
    return {"M_N": m, "M_N_stderr": se, "M_bar_N": mb, "M_bar_N_stderr": seb,
            "used": max(m, mb), "used_stderr": se if m >= mb else seb}


# ---------------------------------------------------------------- bounds

def _guard(C, K, beta):
    if not 0 < beta < 1:
        raise UsageError("beta must lie in (0, 1)")
    if beta * K >= 1:
        raise BoundInapplicable(f"beta*K = {beta * K:.6g} >= 1")
    if C < 0 or K < 0:
        raise UsageError("constants must be nonnegative")


def bound_closed_infinite(lam: float, C: float, K: float, beta: float) -> float:
    _guard(C, K, beta)
    return 2 * lam * (beta * C - beta * K + 1) / ((1 - beta) ** 2 * (1 - beta * K))


def bound_open_infinite(lam: float, C: float, K: float, beta: float) -> float:
    _guard(C, K, beta)
    return 2 * lam * (beta * (C - K) + 1) / ((1 - beta) * (1 - beta * K))


def bound_value_mismatch(lam: float, C: float, K: float, beta: float) -> float:
    """Distance between the optimal values of two models lam apart."""
    _guard(C, K, beta)
    return lam * (beta * C - beta * K + 1) / ((1 - beta) * (1 - beta * K))


def _mn_term(C, K, beta, m_n):
    return m_n * 4 * beta * C / ((1 - beta) * (1 - beta * K))


def bound_open_finite(lam: float, C: float, K: float, beta: float, m_n: float) -> float:
    _guard(C, K, beta)
    return 2 * lam * (beta * C - beta * K + 1) / ((1 - beta) * (1 - beta * K)) + _mn_term(C, K, beta, m_n)


def bound_closed_finite(lam: float, C: float, K: float, beta: float, m_n: float) -> float:
    _guard(C, K, beta)
    return lam * 2 * (beta * C - beta * K + 1) / ((1 - beta) ** 2 * (1 - beta * K)) + _mn_term(C, K, beta, m_n)


def bound_finite_vs_infinite_value(C: float, K: float, beta: float, m_n: float) -> float:
    _guard(C, K, beta)
    return 2 * beta * C / ((1 - beta) * (1 - beta * K)) * m_n


def flow_divergence_bound(lam: float, delta_t: float, k_f: float, m_n: float, t: int) -> float:
    """sum_{n<t} (delta_t + k_f)^n (lam + 2 m_n)."""
    K = delta_t + k_f
    return sum(K**n for n in range(t)) * (lam + 2 * m_n)


# ------------------------------------------------------------ verification

@dataclass
class Scenario:
    name: str
    model_true: FiniteMFCModel
    model_hat: FiniteMFCModel
    mode: str = "closed"  # or "open"
    beta: float = 0.5
    mu0: Optional[np.ndarray] = None
    N: Optional[int] = None  # None: infinite population
    resolution: int = 8
    constants_resolution: int = 8
    lattice_q: int = 2
    tol: float = 1e-8
    truncation_tol: float = 1e-4
    reps: int = 200
    mn_reps: int = 2000
    seed: int = 0
    lambda_extra: float = 0.0  # e.g. the projection distance of a learned kernel
    force_bound: Optional[float] = None  # negative control: fabricated bound, addenda dropped
    expect: bool = True


@dataclass
class ExecutionReport:
    scenario: str
    mode: str
    population: str
    realized_cost: float
    realized_stderr: float
    reference_cost: float
    reference_kind: str
    gap: float
    bound: float
    bound_inputs: dict
    addenda: dict
    verdict: bool
    expect: bool = True
    notes: list = field(default_factory=list)

    @property
    def threshold(self) -> float:
        return self.bound + sum(self.addenda.values())

    def to_json(self) -> dict:
        d = dict(self.__dict__)
        d["threshold"] = self.threshold
        d["inequality"] = (f"gap {self.gap:.6g} <= bound {self.bound:.6g} + "
                           + " + ".join(f"{k} {v:.3g}" for k, v in self.addenda.items()))
        return d


def _plan(model, grid, beta, q, tol):
    return value_iteration(model, grid, candidate_set(model.n_states, model.n_actions, q), beta, tol)


def verify_gap_le_bound(sc: Scenario) -> ExecutionReport:
    """Run the scenario's execution and reference, and check
    gap <= bound + truncation + discretization (+ Monte Carlo) addenda.

    The reference is the grid planner's value on the true model. For finite N
    it is lowered by the finite-versus-infinite value correction (a
    "composite" reference), which can only enlarge the measured gap.
    """
    true, hat, beta = sc.model_true, sc.model_hat, sc.beta
    n = true.n_states
    cgrid = build_grid(n, sc.constants_resolution)
    consts = estimate_constants(true, cgrid)
    consts.check_contraction(beta)
    C, K = consts.c_const, consts.k_const
    lam_models = uniform_mismatch(true, hat, cgrid)
    lam = lam_models + sc.lambda_extra
    grid = build_grid(n, sc.resolution)
    mu0 = as_measure(build_grid(n, 1).representatives[0] if sc.mu0 is None else sc.mu0)
    notes = []

    plan_hat = _plan(hat, grid, beta, sc.lattice_q, sc.tol)
    plan_true = _plan(true, grid, beta, sc.lattice_q, sc.tol)
    consts_hat = estimate_constants(hat, cgrid)
    disc = 0.0
    for pr, cs in ((plan_true, consts), (plan_hat, consts_hat)):
        lipv = measured_value_lipschitz(pr.value.values, grid)
        disc += 2 * execution_addendum(cs, beta, lipv, grid, pr.value.bellman_residual)
    start = grid.project(mu0)
    start_gap = 0.5 * np.abs(grid.representatives[start] - mu0).sum()
    if start_gap > 0:
        disc += measured_value_lipschitz(plan_true.value.values, grid) * start_gap
        notes.append("mu0 is off-grid; reference read at its bin")
    V0 = float(plan_true.value.values[start])

    horizon = truncation_horizon(beta, consts.c_sup, sc.truncation_tol)
    addenda = {"discretization": disc}
    inputs = {"lambda": lam, "lambda_models": lam_models, "lambda_extra": sc.lambda_extra,
              "C": C, "K": K, "beta": beta, "constants": consts.to_json(), "horizon": horizon}
    se = 0.0
    if sc.N is None:
        population = "infinite"
        if sc.mode == "closed":
            run = run_closed_loop_infinite(true, plan_hat.policy, mu0, beta, horizon, consts.c_sup)
            bound = bound_closed_infinite(lam, C, K, beta)
        elif sc.mode == "open":
            run = run_open_loop_infinite(true, hat, plan_hat.policy, mu0, beta, horizon, consts.c_sup)
            bound = bound_open_infinite(lam, C, K, beta)
        else:
            raise UsageError(f"unknown mode {sc.mode!r}")
        realized = run.cost
        addenda["truncation"] = run.truncation_bound
        reference, kind = V0, "grid-planner"
    else:
        population = f"N={sc.N}"
        emp = empirical_constants(n, true.n_actions, sc.N, sc.mn_reps, sc.seed)
        m_n = emp["used"]
        inputs.update(M_N=emp["M_N"], M_bar_N=emp["M_bar_N"], m_n_used=m_n)
        notes.append("M_N term uses max(M_N, M_bar_N)")
        pop0 = population_from_measure(mu0, sc.N)
        if sc.mode == "closed":
            res = run_closed_loop_finite(true, sc.N, plan_hat.policy, pop0, beta, horizon, sc.seed,
                                         sc.reps, consts.c_sup)
            bound = bound_closed_finite(lam, C, K, beta, m_n)
        elif sc.mode == "open":
            res = run_open_loop_finite(true, sc.N, hat, plan_hat.policy, pop0, beta, horizon, sc.seed,
                                       sc.reps, consts.c_sup)
            bound = bound_open_finite(lam, C, K, beta, m_n)
        else:
            raise UsageError(f"unknown mode {sc.mode!r}")
        realized, se = res.mean, res.stderr
        corr = bound_finite_vs_infinite_value(C, K, beta, m_n)
        reference, kind = V0 - corr, "composite"
        inputs["finite_correction"] = corr
        addenda["truncation"] = res.truncation_bound
        addenda["monte_carlo"] = 3 * se + _mn_term(C, K, beta, 3 * emp["used_stderr"])
    if sc.force_bound is not None:
        bound = float(sc.force_bound)
        addenda = {k: 0.0 for k in addenda}
        notes.append("negative control: fabricated bound, addenda zeroed")
    gap = realized - reference
    report = ExecutionReport(sc.name, sc.mode, population, realized, se, reference, kind, gap, bound,
                             inputs, addenda, False, sc.expect, notes)
    report.verdict = bool(gap <= report.threshold)
    return report


def negative_control(beta: float = 0.9) -> Scenario:
    """The uncoordinated mixture of the decentralization example, checked
    against a fabricated zero bound: must fail."""
    return Scenario("negative-control", decentralization_model(), decentralization_model(), "closed", beta,
                    np.array([0.5, 0.5]), force_bound=0.0, expect=False)


def verify_negative_control(beta: float = 0.9) -> ExecutionReport:
    sc = negative_control(beta)
    mix = 0.5 * np.full((2, 2), 0.5) + 0.5 * dirac_policy(2, 2, 0)
    run = run_closed_loop_infinite(sc.model_true, mix, sc.mu0, beta, 10_000)
    rep = ExecutionReport(sc.name, "closed", "infinite", run.cost, 0.0, 0.0, "known-optimum", run.cost, 0.0,
                          {"beta": beta}, {"truncation": 0.0, "discretization": 0.0}, False, False,
                          ["negative control: fabricated bound 0 with a positive gap"])
    rep.verdict = bool(rep.gap <= rep.threshold)
    return rep


# ------------------------------------------------------ example reproduction

def decentralization_policies():
    g1 = np.full((2, 2), 0.5)
    g2 = dirac_policy(2, 2, 0)
    return g1, g2, 0.5 * g1 + 0.5 * g2


def reproduce_decentralization_example(beta: float) -> tuple[float, float, float]:
    """Exact-flow costs of the two coordinated optimal policies and of their
    uncoordinated 50/50 mixture, starting from (1/2, 1/2)."""
    if not 0 < beta < 1:
        raise UsageError("beta must lie in (0, 1)")
    model = decentralization_model()
    mu0 = np.array([0.5, 0.5])
    horizon = truncation_horizon(beta, 10.0, 1e-12)
    out = []
    for g in decentralization_policies():
        run = run_closed_loop_infinite(model, g, mu0, beta, horizon, c_sup=10.0)
        out.append(run.cost)
    return tuple(out)
