"""Finite-N agent systems, the infinite-population flow, and a brute-force
solver for tiny teams.

Agent policies are either an (|X|, |U|) row-stochastic array (ignores mu) or a
callable ``mu -> (|X|, |U|) array``; row x is the action law of an agent in
state x.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

from .model import FiniteMFCModel, ModelIntegrityError, sample_next, sample_rows
from .rng import as_rng, make_rng
from .simplex import RENORM_TOL, UsageError, as_measure, empirical_from_states

Policy = Union[np.ndarray, Callable[[np.ndarray], np.ndarray]]


class CapacityError(RuntimeError):
    """An enumeration would exceed its configured cap."""


def policy_matrix(policy: Policy, mu) -> np.ndarray:
    g = policy(mu) if callable(policy) else policy
    return np.asarray(g, dtype=np.float64)


def constant_policy(rows) -> np.ndarray:
    g = np.array(rows, dtype=np.float64)
    if g.ndim != 2 or np.any(g < 0) or not np.allclose(g.sum(1), 1.0, atol=1e-12):
        raise UsageError("policy rows must be probability vectors")
    return g


def dirac_policy(n_states: int, n_actions: int, actions) -> np.ndarray:
    """Deterministic map x -> actions[x] (an int applies to every state)."""
    acts = np.broadcast_to(np.asarray(actions), (n_states,))
    g = np.zeros((n_states, n_actions))
    g[np.arange(n_states), acts] = 1.0
    return g


# ------------------------------------------------------------ finite agents

def _quota_actions(states, gamma, n_actions, rng):
    """Give each state's agents actions in the exact proportions gamma(.|x),
    rounding by largest remainder (random among equal remainders)."""
    acts = np.empty(states.size, dtype=np.int64)
    for x in np.unique(states):
        who = np.flatnonzero(states == x)
        n = who.size
        target = n * gamma[x]
        counts = np.floor(target + 1e-12).astype(np.int64)
        short = n - counts.sum()
        if short > 0:
            frac = target - counts + 1e-9 * rng.random(n_actions)
            counts[np.argsort(-frac, kind="stable")[:short]] += 1
        acts[rng.permutation(who)] = np.repeat(np.arange(n_actions), counts)
    return acts


def step_finite(model: FiniteMFCModel, states, policies, rng, coordination: str = "independent"):
    """One transition of the N-agent system.

    ``policies`` is either one shared policy or a list with one per agent.
    ``coordination="quota"`` realizes a shared policy by splitting each state's
    agents in exact proportions instead of independent draws.

    Returns (next states, joint state-action measure, stage cost).
    """
    rng = as_rng(rng)
    states = np.asarray(states, dtype=np.int64)
    n, a = model.n_states, model.n_actions
    N = states.size
    mu = empirical_from_states(states, n)
    per_agent = isinstance(policies, (list, tuple))
    if per_agent and len(policies) != N:
        raise UsageError(f"got {len(policies)} policies for {N} agents")
    if per_agent:
        rows = np.stack([policy_matrix(p, mu)[x] for p, x in zip(policies, states)])
        actions = sample_rows(rows, np.arange(N), rng.random(N))
    else:
        gamma = policy_matrix(policies, mu)
        if coordination == "quota":
            actions = _quota_actions(states, gamma, a, rng)
        elif coordination == "independent":
            actions = sample_rows(gamma, states, rng.random(N))
        else:
            raise UsageError(f"unknown coordination {coordination!r}")
    table = model.kernel_table(mu)
    cost = float(model.cost_table(mu)[states, actions].mean())
    theta = np.zeros((n, a))
    np.add.at(theta, (states, actions), 1.0 / N)
    nxt = sample_next(model, states, actions, mu, rng.random(N), table)
    return nxt, theta, cost


# -------------------------------------------------------- mean-field flow

def mean_field_step(model: FiniteMFCModel, mu, gamma: Policy) -> np.ndarray:
    mu = np.asarray(mu, dtype=np.float64)
    g = policy_matrix(gamma, mu)
    out = np.einsum("x,xu,xuy->y", mu, g, model.kernel_table(mu))
    s = out.sum()
    if abs(s - 1.0) > 1e-6 or np.any(out < -RENORM_TOL):
        raise ModelIntegrityError(f"flow left the simplex (mass {s!r})")
    if s != 1.0:
        out = np.clip(out, 0.0, None)
        out /= out.sum()
    return out


def stage_cost_infinite(model: FiniteMFCModel, mu, gamma: Policy) -> float:
    mu = np.asarray(mu, dtype=np.float64)
    g = policy_matrix(gamma, mu)
    return float(np.einsum("x,xu,xu->", mu, g, model.cost_table(mu)))


def flow(model: FiniteMFCModel, policy: Policy, mu0, steps: int) -> np.ndarray:
    """mu_0, ..., mu_steps under a (possibly mu-dependent) shared policy."""
    out = np.empty((steps + 1, model.n_states))
    out[0] = as_measure(mu0)
    for t in range(steps):
        out[t + 1] = mean_field_step(model, out[t], policy)
    return out


# ------------------------------------------------------ measure-valued MDP

def _compositions(total: int, parts: int):
    for bars in itertools.combinations(range(total + parts - 1), parts - 1):
        prev = -1
        row = []
        for b in bars:
            row.append(b - prev - 1)
            prev = b
        row.append(total + parts - 2 - prev)
        yield row


def admissible_actions(mu_n, N: int, n_actions: int, cap: int = 10_000) -> list[np.ndarray]:
    """All joint state-action measures in P_N(X x U) with X-marginal mu_n."""
    mu_n = np.asarray(mu_n, dtype=np.float64)
    if N * mu_n.size * n_actions > cap:
        raise CapacityError(f"N*|X|*|U| = {N * mu_n.size * n_actions} exceeds cap {cap}")
    counts = mu_n * N
    if not np.allclose(counts, np.round(counts), atol=1e-9):
        raise UsageError("N * mu_N must have integer entries")
    counts = np.round(counts).astype(int)
    per_state = [list(_compositions(int(c), n_actions)) for c in counts]
    out = []
    for combo in itertools.product(*per_state):
        out.append(np.array(combo, dtype=np.float64) / N)
    return out


@dataclass
class TeamSolution:
    states: np.ndarray  # (S, N) joint states
    actions: np.ndarray  # (A, N) joint actions
    values: np.ndarray  # (S,)
    policy: np.ndarray  # (S,) index into actions
    residual: float
    sweeps: int
    n_states: int

    def index(self, pop) -> int:
        pop = np.asarray(pop, dtype=np.int64)
        return int(np.ravel_multi_index(tuple(pop), (self.n_states,) * pop.size))

    def value(self, pop) -> float:
        return float(self.values[self.index(pop)])


def brute_force_optimal_team(model: FiniteMFCModel, N: int, beta: float, tol: float = 1e-8,
                             cap: int = 10**6, max_sweeps: int = 10**6) -> TeamSolution:
    """Exact value iteration for the centralized N-agent MDP on X^N x U^N.

    Searches stationary Markov team policies, which suffice for a discounted
    finite MDP.
    """
    n, a = model.n_states, model.n_actions
    S, A = n**N, a**N
    if S * A > cap:
        raise CapacityError(f"|X|^N * |U|^N = {S * A} exceeds cap {cap}")
    if S * A * S > 5 * 10**7:
        raise CapacityError(f"transition tensor with {S * A * S} entries is too large")
    states = np.array(list(itertools.product(range(n), repeat=N)), dtype=np.int64).reshape(S, N)
    actions = np.array(list(itertools.product(range(a), repeat=N)), dtype=np.int64).reshape(A, N)
    cost = np.empty((S, A))
    P = np.empty((S, A, S))
    for s in range(S):
        xs = states[s]
        mu = np.bincount(xs, minlength=n) / N
        K = model.kernel_table(mu)
        C = model.cost_table(mu)
        cost[s] = C[xs[None, :], actions].mean(axis=1)
        rows = K[xs[None, :], actions]  # (A, N, n)
        prob = np.ones((A, S))
        for i in range(N):
            prob *= rows[:, i, states[:, i]]
        P[s] = prob
    V = np.zeros(S)
    stop = tol * (1 - beta) / (2 * beta)
    for sweep in range(1, max_sweeps + 1):
        Q = cost + beta * (P @ V)
        Vn = Q.min(axis=1)
        res = float(np.abs(Vn - V).max())
        V = Vn
        if res <= stop:
            break
    else:
        raise RuntimeError("team value iteration did not converge")
    policy = (cost + beta * (P @ V)).argmin(axis=1)
    return TeamSolution(states, actions, V, policy, res, sweep, n)


# ---------------------------------------------------------------- rollouts

def truncation_horizon(beta: float, c_sup: float, tol: float) -> int:
    """Smallest H with beta^H * c_sup / (1 - beta) <= tol."""
    if not 0 < beta < 1:
        raise UsageError("beta must lie in (0, 1)")
    if c_sup <= tol * (1 - beta):
        return 1
    return max(1, math.ceil(math.log(tol * (1 - beta) / c_sup) / math.log(beta)))


def truncation_bound(beta: float, c_sup: float, horizon: int) -> float:
    return beta**horizon * c_sup / (1 - beta)


@dataclass
class RolloutResult:
    mean: float
    stderr: float
    horizon: int
    truncation_bound: float
    costs: np.ndarray

    def to_json(self) -> dict:
        return {"mean": self.mean, "stderr": self.stderr, "horizon": self.horizon,
                "truncation_bound": self.truncation_bound, "reps": int(self.costs.size)}


def summarize(costs, horizon, trunc) -> RolloutResult:
    costs = np.asarray(costs, dtype=np.float64)
    se = float(costs.std(ddof=1) / math.sqrt(costs.size)) if costs.size > 1 else 0.0
    return RolloutResult(float(costs.mean()), se, horizon, trunc, costs)


def rollout_finite(model: FiniteMFCModel, pop0, policy: Policy, beta: float, horizon: int,
                   seed: int = 0, reps: int = 100, c_sup: float | None = None,
                   coordination: str = "independent", record: Sequence | None = None,
                   stream: str = "rollout") -> RolloutResult:
    """Monte Carlo discounted cost of a shared policy, truncated at ``horizon``.

    Replication r draws from ``make_rng(seed, stream, r)``. If ``record`` is a
    list, the first replication's per-step (states, stage cost) are appended.
    """
    pop0 = np.asarray(pop0, dtype=np.int64)
    costs = np.empty(reps)
    for r in range(reps):
        rng = make_rng(seed, stream, r)
        x = pop0.copy()
        total, disc = 0.0, 1.0
        for t in range(horizon):
            nxt, _, c = step_finite(model, x, policy, rng, coordination)
            if record is not None and r == 0:
                record.append((t, x.copy(), c))
            total += disc * c
            disc *= beta
            x = nxt
        costs[r] = total
    trunc = truncation_bound(beta, c_sup, horizon) if c_sup is not None else float("nan")
    return summarize(costs, horizon, trunc)
