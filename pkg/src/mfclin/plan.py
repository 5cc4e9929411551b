"""Value iteration for the lifted (measure-valued, deterministic) control
problem on a simplex grid."""
from __future__ import annotations

import itertools
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .model import BoundInapplicable, ModelConstants
from .simplex import SimplexGrid, UsageError, build_grid, lattice_points


class NonConvergence(RuntimeError):
    pass


@dataclass(frozen=True)
class PolicyCandidateSet:
    """Agent-level policies gamma (shape (C, |X|, |U|)) the planner chooses from."""

    policies: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.policies, dtype=np.float64)
        if p.ndim != 3 or p.shape[0] == 0:
            raise UsageError("candidate set must be a nonempty (C, |X|, |U|) array")
        if np.any(p < 0) or not np.allclose(p.sum(-1), 1.0, atol=1e-12):
            raise UsageError("candidate rows must be probability vectors")
        object.__setattr__(self, "policies", p)

    def __len__(self):
        return self.policies.shape[0]

    def __getitem__(self, i):
        return self.policies[i]


def candidate_set(n_states: int, n_actions: int, q: int | None = 2) -> PolicyCandidateSet:
    """Deterministic maps x -> u first (in product order), then every other
    policy whose rows lie on the 1/q lattice of action distributions."""
    eye = np.eye(n_actions)
    det = [eye[list(m)] for m in itertools.product(range(n_actions), repeat=n_states)]
    out = list(det)
    if q is not None and q > 1:
        rows = lattice_points(n_actions, q) / q
        for combo in itertools.product(range(rows.shape[0]), repeat=n_states):
            g = rows[list(combo)]
            if np.all(g.max(axis=1) == 1.0):
                continue  # deterministic, already listed
            out.append(g)
    return PolicyCandidateSet(np.stack(out))


@dataclass
class LiftedSystem:
    """The grid MDP: stage cost, successor bin and projection distance per
    (representative, candidate)."""

    grid: SimplexGrid
    candidates: PolicyCandidateSet
    stage: np.ndarray  # (B, C)
    nxt: np.ndarray  # (B, C)
    proj_dist: np.ndarray  # (B, C)

    @property
    def max_projection(self) -> float:
        return float(self.proj_dist.max())

    def backup(self, V, beta):
        return kernels.bellman_sweep(self.stage, self.nxt, V, beta)


def lift(model, grid: SimplexGrid, candidates: PolicyCandidateSet) -> LiftedSystem:
    """``model`` needs kernel_table/cost_table with probability rows (a learned
    linear model must be projected first: use ``LinearModel.as_model()``)."""
    if model.n_states != grid.n:
        raise UsageError("grid and model disagree on |X|")
    G = candidates.policies
    B, C = grid.size, G.shape[0]
    stage = np.empty((B, C))
    nxt_mu = np.empty((B, C, grid.n))
    for i, mu in enumerate(grid.representatives):
        K = model.kernel_table(mu)
        c = model.cost_table(mu)
        stage[i] = np.einsum("x,cxu,xu->c", mu, G, c)
        nm = np.einsum("x,cxu,xuy->cy", mu, G, K)
        nxt_mu[i] = nm / nm.sum(axis=1, keepdims=True)
    idx, dist = kernels.nearest_rep(nxt_mu.reshape(B * C, grid.n), grid.representatives)
    return LiftedSystem(grid, candidates, stage, idx.reshape(B, C), dist.reshape(B, C))


@dataclass
class ValueFunction:
    values: np.ndarray
    bellman_residual: float
    sweeps: int = 0
    diffs: list = field(default_factory=list)

    def to_json(self, grid: SimplexGrid) -> dict:
        return {
            "resolution": grid.resolution,
            "cardinality": grid.n,
            "bellman_residual": self.bellman_residual,
            "sweeps": self.sweeps,
            "values": {str(i): float(v) for i, v in enumerate(self.values)},
            "representatives": {str(i): r.tolist() for i, r in enumerate(grid.representatives)},
        }


@dataclass
class MeasurePolicy:
    """mu -> candidate chosen at mu's grid bin."""

    grid: SimplexGrid
    candidates: PolicyCandidateSet
    choice: np.ndarray  # (B,) candidate index per bin

    def index(self, mu) -> int:
        return int(self.choice[self.grid.project(mu)])

    def __call__(self, mu) -> np.ndarray:
        return self.candidates.policies[self.index(mu)]

    def to_json(self) -> dict:
        return {
            "resolution": self.grid.resolution,
            "cardinality": self.grid.n,
            "candidates": self.candidates.policies.tolist(),
            "choice": {str(i): int(c) for i, c in enumerate(self.choice)},
        }

    @classmethod
    def from_json(cls, data: dict) -> "MeasurePolicy":
        grid = build_grid(int(data["cardinality"]), int(data["resolution"]))
        cands = PolicyCandidateSet(np.array(data["candidates"]))
        choice = np.array([data["choice"][str(i)] for i in range(grid.size)], dtype=np.int64)
        return cls(grid, cands, choice)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path) -> "MeasurePolicy":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def bellman_backup(model, grid: SimplexGrid, candidates: PolicyCandidateSet, V, beta: float,
                   lifted: LiftedSystem | None = None):
    """V'(mu_i) = min over candidates of k(mu_i, gamma) + beta V(project(F(mu_i, gamma)))."""
    sys = lifted or lift(model, grid, candidates)
    Vn, greedy = sys.backup(np.asarray(V, dtype=np.float64), beta)
    return Vn, MeasurePolicy(grid, candidates, greedy)


@dataclass
class PlanResult:
    value: ValueFunction
    policy: MeasurePolicy
    lifted: LiftedSystem
    tol: float

    def value_at(self, mu) -> float:
        return float(self.value.values[self.lifted.grid.project(mu)])


def value_iteration(model, grid: SimplexGrid, candidates: PolicyCandidateSet, beta: float,
                    tol: float = 1e-8, max_sweeps: int = 10**5, V0=None,
                    constants: ModelConstants | None = None) -> PlanResult:
    """Iterate backups until the sup change is <= tol (1 - beta) / (2 beta)."""
    if tol <= 0:
        raise UsageError("tol must be positive")
    if not 0 < beta < 1:
        raise UsageError("beta must lie in (0, 1)")
    if constants is not None and beta * constants.k_const >= 1:
        warnings.warn(f"beta*K = {beta * constants.k_const:.3g} >= 1; value Lipschitz certificate unavailable")
    sys = lift(model, grid, candidates)
    V = np.zeros(grid.size) if V0 is None else np.asarray(V0, dtype=np.float64).copy()
    stop = tol * (1 - beta) / (2 * beta)
    diffs = []
    for sweep in range(1, max_sweeps + 1):
        Vn, _ = sys.backup(V, beta)
        diff = float(np.abs(Vn - V).max())
        diffs.append(diff)
        V = Vn
        if diff <= stop:
            break
    else:
        raise NonConvergence(f"value iteration did not reach {stop:.3g} in {max_sweeps} sweeps")
    Vg, greedy = sys.backup(V, beta)
    vf = ValueFunction(V, float(np.abs(Vg - V).max()), sweep, diffs)
    return PlanResult(vf, MeasurePolicy(grid, candidates, greedy), sys, tol)


def grid_policy_value(lifted: LiftedSystem, choice, start: int, beta: float, horizon: int) -> float:
    """Discounted cost of following ``choice`` on the grid system from bin ``start``."""
    total, disc, i = 0.0, 1.0, start
    for _ in range(horizon):
        c = choice[i]
        total += disc * lifted.stage[i, c]
        disc *= beta
        i = lifted.nxt[i, c]
    return total


def lip_value_certificate(constants: ModelConstants, beta: float) -> float:
    """C / (1 - beta K), a Lipschitz constant for the optimal value."""
    if beta * constants.k_const >= 1:
        raise BoundInapplicable(f"beta*K = {beta * constants.k_const:.6g} >= 1")
    return constants.c_const / (1 - beta * constants.k_const)


def measured_value_lipschitz(values, grid: SimplexGrid) -> float:
    """Largest |V(mu_i) - V(mu_j)| / tv(mu_i, mu_j) over representative pairs."""
    V = np.asarray(values)
    R = grid.representatives
    best = 0.0
    for i in range(R.shape[0] - 1):
        d = 0.5 * np.abs(R[i + 1:] - R[i]).sum(1)
        best = max(best, float((np.abs(V[i + 1:] - V[i]) / d).max()))
    return best


def check_value_lipschitz(values, grid: SimplexGrid, constants: ModelConstants, beta: float,
                          slack: float = 1.0) -> tuple[float, float, bool]:
    """(measured, allowed, ok) with allowed = cert + 2 L cert slack; the extra
    term absorbs the grid's projection error."""
    cert = lip_value_certificate(constants, beta)
    measured = measured_value_lipschitz(values, grid)
    allowed = cert + 2 * grid.diameter * cert * slack
    return measured, allowed, measured <= allowed


def execution_addendum(constants: ModelConstants, beta: float, value_lip: float, grid: SimplexGrid,
                       residual: float) -> float:
    """Bound on |J(mu) - V(project(mu))| when a grid policy runs on the exact flow.

    Per step, evaluating at mu instead of its representative changes the stage
    cost by at most (2 c_sup + K_c) rho and, after one flow step under the same
    gamma, moves the successor's representative by at most (2 + K) rho in tv,
    where rho is the grid covering radius. Summing geometrically:

        e <= [(2 c_sup + K_c) rho + beta Lip(V) (2 + K) rho + residual] / (1 - beta)

    with ``residual`` the Bellman residual sup |TV - V| of the computed values.
    """
    rho = grid.covering_radius
    per = (2 * constants.c_sup + constants.k_c) * rho + beta * value_lip * (2 + constants.k_const) * rho
    return (per + residual) / (1 - beta)
