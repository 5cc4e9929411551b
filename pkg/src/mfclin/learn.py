"""Learning linear models of the cost and kernel.

Three procedures: batch least squares from a coordinator's training set,
online stochastic approximation by one agent of an infinite population
(exact flow plus a representative agent, with coordinator-broadcast
exploration), and the same online rule run by one agent of a finite team.
Also the generic Markov-noise SGD for a quadratic objective.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import kernels
from .linfa import BasisFamily, LinearModel
from .model import FiniteMFCModel
from .rng import as_rng, make_rng
from .simplex import UsageError, as_measure, uniform


class DivergenceError(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"iterate became non-finite at step {step}")
        self.step = step


# --------------------------------------------------------- batch learning

@dataclass
class TrainingSet:
    mus: np.ndarray  # (M, |X|)
    costs: np.ndarray  # (M, |X|, |U|)
    kernels: np.ndarray  # (M, |X|, |U|, |X|)

    def __post_init__(self):
        if self.mus.shape[0] < 1:
            raise UsageError("training set is empty")


def make_training_set(model: FiniteMFCModel, mus) -> TrainingSet:
    mus = np.stack([as_measure(m) for m in mus])
    return TrainingSet(
        mus,
        np.stack([model.cost_table(m) for m in mus]),
        np.stack([model.kernel_table(m) for m in mus]),
    )


@dataclass
class FitReport:
    rank: int
    rank_deficient: bool
    rms_cost: np.ndarray  # (|X|, |U|)
    rms_kernel_tv: np.ndarray
    rms_kernel_coord: np.ndarray

    def to_json(self) -> dict:
        return {"rank": self.rank, "rank_deficient": self.rank_deficient,
                "rms_cost": self.rms_cost.tolist(), "rms_kernel_tv": self.rms_kernel_tv.tolist(),
                "rms_kernel_coord": self.rms_kernel_coord.tolist(),
                "max_rms_cost": float(self.rms_cost.max()),
                "max_rms_kernel_tv": float(self.rms_kernel_tv.max())}


def residual_summary(lm: LinearModel, ts: TrainingSet):
    phi = lm.basis.batch(ts.mus)
    ec = ts.costs - np.einsum("md,xud->mxu", phi, lm.theta)
    ek = ts.kernels - np.einsum("md,xudy->mxuy", phi, lm.q)
    return (np.sqrt((ec**2).mean(0)),
            np.sqrt(((0.5 * np.abs(ek).sum(-1)) ** 2).mean(0)),
            np.sqrt((ek**2).sum(-1).mean(0)))


def coordinated_least_squares(ts: TrainingSet, basis: BasisFamily) -> tuple[LinearModel, FitReport]:
    """theta = (A'A)^-1 A'b and Q = (A'A)^-1 A'D for every (x, u) at once.

    Falls back to the minimum-norm least-squares solution when A lacks full
    column rank, and says so in the report.
    """
    n, a = ts.costs.shape[1:]
    A = basis.batch(ts.mus)  # (M, d)
    M, d = A.shape
    rhs = np.concatenate([ts.costs.reshape(M, -1), ts.kernels.reshape(M, -1)], axis=1)
    rank = int(np.linalg.matrix_rank(A))
    deficient = rank < d
    if deficient:
        sol = np.linalg.lstsq(A, rhs, rcond=None)[0]
    else:
        sol = np.linalg.solve(A.T @ A, A.T @ rhs)
    theta = sol[:, : n * a].T.reshape(n, a, d)
    q = sol[:, n * a:].reshape(d, n, a, n).transpose(1, 2, 0, 3)
    lm = LinearModel(basis, theta, np.ascontiguousarray(q), info={"method": "coordinated_least_squares",
                                                                    "rank_deficient": deficient})
    rc, rk, rq = residual_summary(lm, ts)
    return lm, FitReport(rank, deficient, rc, rk, rq)


# --------------------------------------------------- Markov-noise SGD core

@dataclass
class SGDResult:
    trajectory: np.ndarray  # (T+1, d)
    objective: np.ndarray  # (T,) empirical objective at v_{t+1} over s_0..s_t

    @property
    def final(self) -> np.ndarray:
        return self.trajectory[-1]


def sgd_markov_quadratic(chain, k_fn: Callable, h_fn: Callable, v0, steps: Optional[int] = None,
                         backend: Optional[str] = None) -> SGDResult:
    """v_{t+1} = v_t - (1/t) * 2 k(s_t) (k(s_t).v_t - h(s_t)), t = 1, 2, ...

    ``k_fn`` and ``h_fn`` are applied to the whole array of chain states and
    must return shapes (T, d) and (T,).
    """
    s = np.asarray(chain)
    if steps is not None:
        if steps > s.shape[0]:
            raise UsageError("chain is shorter than the requested number of steps")
        s = s[:steps]
    K = np.asarray(k_fn(s), dtype=np.float64).reshape(s.shape[0], -1)
    H = np.asarray(h_fn(s), dtype=np.float64).reshape(s.shape[0])
    v0 = np.asarray(v0, dtype=np.float64).reshape(-1)
    if K.shape[1] != v0.size:
        raise UsageError("k_fn output dimension does not match v0")
    V, G, bad = kernels.sgd_quadratic(K, H, v0, backend=backend)
    if bad >= 0:
        raise DivergenceError(int(bad))
    return SGDResult(V, G)


def simulate_chain(P, s0: int, steps: int, rng) -> np.ndarray:
    """Path s_0, ..., s_{steps-1} of a finite Markov chain with matrix P."""
    rng = as_rng(rng)
    P = np.asarray(P, dtype=np.float64)
    cdf = np.cumsum(P, axis=1)
    cdf[:, -1] = 1.0
    u = rng.random(steps)
    out = np.empty(steps, dtype=np.int64)
    s = s0
    for t in range(steps):
        out[t] = s
        s = int(np.searchsorted(cdf[s], u[t], side="right"))
    return out


def mixing_diagnostic(series, max_lag: int = 50) -> np.ndarray:
    """Autocorrelation of each coordinate of a trajectory at lags 0..max_lag,
    reduced by max absolute value across coordinates. A diagnostic only."""
    x = np.asarray(series, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    x = x - x.mean(0)
    var = (x**2).mean(0)
    out = np.zeros(max_lag + 1)
    for lag in range(max_lag + 1):
        if lag >= x.shape[0]:
            break
        c = (x[: x.shape[0] - lag] * x[lag:]).mean(0)
        with np.errstate(invalid="ignore", divide="ignore"):
            r = np.where(var > 0, c / np.where(var > 0, var, 1.0), 0.0)
        out[lag] = np.abs(r).max()
    return out


# ------------------------------------------------------- online learning

@dataclass
class ExplorationScheme:
    """Policies gamma_w (shape (W, |X|, |U|)) and selection probabilities.

    mode "common": a coordinator draws one w per step for everybody.
    mode "independent": every agent draws its own w.
    """

    policies: np.ndarray
    probs: np.ndarray
    mode: str = "common"

    def __post_init__(self):
        self.policies = np.asarray(self.policies, dtype=np.float64)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.mode not in ("common", "independent"):
            raise UsageError(f"unknown exploration mode {self.mode!r}")
        if self.policies.ndim != 3 or self.probs.shape != (self.policies.shape[0],):
            raise UsageError("policies must be (W, |X|, |U|) with one probability per policy")
        if np.any(self.policies < 0) or not np.allclose(self.policies.sum(-1), 1.0):
            raise UsageError("exploration policy rows must be probability vectors")
        if np.any(self.probs < 0) or not np.isclose(self.probs.sum(), 1.0):
            raise UsageError("exploration probabilities must form a distribution")

    def floored(self, eps: float) -> np.ndarray:
        """Policies mixed with the uniform action law at weight eps."""
        a = self.policies.shape[2]
        return (1 - eps) * self.policies + eps / a

    @property
    def mixture(self) -> np.ndarray:
        return np.einsum("w,wxu->xu", self.probs, self.policies)


def deterministic_exploration(n_states: int, n_actions: int, mode: str = "common") -> ExplorationScheme:
    """Every deterministic map x -> u, chosen uniformly."""
    maps = list(itertools.product(range(n_actions), repeat=n_states))
    pol = np.zeros((len(maps), n_states, n_actions))
    for i, m in enumerate(maps):
        pol[i, np.arange(n_states), m] = 1.0
    return ExplorationScheme(pol, np.full(len(maps), 1.0 / len(maps)), mode)


@dataclass
class History:
    """What the learning agent saw at each step."""

    mus: np.ndarray  # (T, |X|)
    xu: np.ndarray  # (T,) flattened x * |U| + u
    cost: np.ndarray  # (T,)
    nxt: np.ndarray  # (T,)
    krow: np.ndarray  # (T, |X|) true kernel row at the step (for residuals)

    def __len__(self):
        return self.xu.size


@dataclass
class LearnResult:
    model: LinearModel
    visits: np.ndarray  # (|X|, |U|)
    history: History
    curve: list = field(default_factory=list)
    relative_change: float = float("nan")
    converged: bool = False
    flow_autocorr: Optional[np.ndarray] = None

    def residuals(self, upto: Optional[int] = None) -> dict:
        return online_residuals(self.model, self.history, upto)


def online_residuals(lm: LinearModel, hist: History, upto: Optional[int] = None,
                     chunk: int = 1 << 16) -> dict:
    """Root-mean-square errors of the fit under the empirical visitation
    measure: for each (x, u), the mu's seen while the agent was at (x, u)."""
    n, a = lm.n_states, lm.n_actions
    T = len(hist) if upto is None else upto
    sc = np.zeros(n * a)
    sk = np.zeros(n * a)
    sq = np.zeros(n * a)
    cnt = np.zeros(n * a)
    th = lm.theta.reshape(n * a, -1)
    qq = lm.q.reshape(n * a, lm.q.shape[2], n)
    for lo in range(0, T, chunk):
        hi = min(T, lo + chunk)
        phi = lm.basis.batch(hist.mus[lo:hi])
        s = hist.xu[lo:hi]
        ec = hist.cost[lo:hi] - np.einsum("td,td->t", phi, th[s])
        ek = hist.krow[lo:hi] - np.einsum("td,tdy->ty", phi, qq[s])
        np.add.at(sc, s, ec**2)
        np.add.at(sk, s, (0.5 * np.abs(ek).sum(1)) ** 2)
        np.add.at(sq, s, (ek**2).sum(1))
        np.add.at(cnt, s, 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        rc = np.sqrt(sc / cnt).reshape(n, a)
        rk = np.sqrt(sk / cnt).reshape(n, a)
        rq = np.sqrt(sq / cnt).reshape(n, a)
    tot = max(cnt.sum(), 1)
    return {
        "rms_cost": rc, "rms_kernel_tv": rk, "rms_kernel_coord": rq,
        "pooled_cost": float(np.sqrt(sc.sum() / tot)),
        "pooled_kernel_tv": float(np.sqrt(sk.sum() / tot)),
        "visits": cnt.reshape(n, a).astype(np.int64),
    }


def least_squares_on_history(basis: BasisFamily, hist: History, n_states: int, n_actions: int) -> LinearModel:
    """Per-(x, u) least-squares fit to the exact costs and kernel rows at the
    mu's visited while at (x, u): the best linear model under the same
    empirical measure the online learner sees."""
    d = basis.d
    theta = np.zeros((n_states, n_actions, d))
    q = np.zeros((n_states, n_actions, d, n_states))
    for s in range(n_states * n_actions):
        sel = hist.xu == s
        if not sel.any():
            continue
        A = basis.batch(hist.mus[sel])
        rhs = np.concatenate([hist.cost[sel][:, None], hist.krow[sel]], axis=1)
        sol = np.linalg.lstsq(A, rhs, rcond=None)[0]
        x, u = divmod(s, n_actions)
        theta[x, u] = sol[:, 0]
        q[x, u] = sol[:, 1:]
    return LinearModel(basis, theta, q, info={"method": "least_squares_on_history"})


def _sa_driver(basis, n, a, steps, simulate_segment, checkpoints, backend):
    """Run simulation segments and feed them to the stochastic-approximation kernel."""
    d = basis.d
    theta = np.zeros((n * a, d))
    q = np.zeros((n * a, d, n))
    visits = np.zeros(n * a, dtype=np.int64)
    marks = {int(steps * 0.9), steps}
    marks.update(int(c) for c in checkpoints if 0 < c <= steps)
    marks = sorted(m for m in marks if m > 0)
    hist = History(np.empty((steps, n)), np.empty(steps, dtype=np.int64), np.empty(steps),
                   np.empty(steps, dtype=np.int64), np.empty((steps, n)))
    snap = None
    curve = []
    t = 0
    seg = 1 << 14
    for mark in marks:
        while t < mark:
            hi = min(mark, t + seg)
            simulate_segment(t, hi, hist)
            phi = basis.batch(hist.mus[t:hi])
            kernels.linear_sa(theta, q, visits, hist.xu[t:hi], phi, hist.cost[t:hi], hist.nxt[t:hi],
                              backend=backend)
            t = hi
        if mark == int(steps * 0.9):
            snap = (theta.copy(), q.copy())
        if mark in checkpoints or mark == steps:
            lm = LinearModel(basis, theta.reshape(n, a, d), q.reshape(n, a, d, n))
            r = online_residuals(lm, hist, upto=t)
            curve.append((t, r["rms_cost"].copy(), r["rms_kernel_tv"].copy(), visits.reshape(n, a).copy()))
    unlearned = visits.reshape(n, a) == 0
    lm = LinearModel(basis, theta.reshape(n, a, d).copy(), q.reshape(n, a, d, n).copy(), unlearned)
    rel = float("nan")
    if snap is not None:
        num = np.abs(theta - snap[0]).max() + np.abs(q - snap[1]).max()
        den = max(np.abs(theta).max() + np.abs(q).max(), 1e-12)
        rel = float(num / den)
    return lm, visits.reshape(n, a), hist, curve, rel


def _learn_result(lm, visits, hist, curve, rel, threshold, info):
    lm.info.update(info)
    lm.info["unlearned_pairs"] = [list(map(int, p)) for p in np.argwhere(lm.unlearned)]
    return LearnResult(lm, visits, hist, curve, rel, bool(rel <= threshold),
                       mixing_diagnostic(hist.mus[:: max(1, len(hist) // 20000)], 20))


def independent_learn_infinite(model: FiniteMFCModel, basis: BasisFamily, scheme: ExplorationScheme,
                               steps: int, seed: int = 0, mu0=None, x0: int = 0,
                               eps_floor: float = 0.05, checkpoints=(), threshold: float = 1e-2,
                               backend: Optional[str] = None) -> LearnResult:
    """Online learning by a representative agent of an infinite population.

    The mean-field term follows the exact flow mu_{t+1} = F(mu_t, gamma_{w_t});
    under common randomness w_t is the coordinator's draw, otherwise the flow
    uses the w-mixture and only the representative agent draws its own w. The
    agent updates, at its visited (x, u) only,

        theta += alpha Phi (c - Phi.theta)
        Q^j   += alpha Phi (1{x' = j} - Phi.Q^j)

    with alpha = 1 / (number of visits to (x, u) so far, this one included).
    """
    n, a = model.n_states, model.n_actions
    rng = make_rng(seed, "learn-infinite")
    G = scheme.floored(eps_floor)
    gcdf = np.cumsum(G, axis=2)
    gcdf[..., -1] = 1.0
    W = G.shape[0]
    mixture = np.einsum("w,wxu->xu", scheme.probs, G)
    state = {"mu": as_measure(uniform(n) if mu0 is None else mu0).copy(), "x": int(x0)}

    def segment(lo, hi, hist):
        L = hi - lo
        w_flow = rng.choice(W, size=L, p=scheme.probs)
        w_agent = w_flow if scheme.mode == "common" else rng.choice(W, size=L, p=scheme.probs)
        ua = rng.random(L)
        un = rng.random(L)
        mu, x = state["mu"], state["x"]
        for i in range(L):
            K = model.kernel_table(mu)
            u = int(np.searchsorted(gcdf[w_agent[i], x], ua[i], side="right"))
            row = K[x, u]
            cdf = np.cumsum(row)
            nx = min(int(np.searchsorted(cdf, un[i], side="right")), n - 1)
            t = lo + i
            hist.mus[t] = mu
            hist.xu[t] = x * a + u
            hist.cost[t] = model.cost_table(mu)[x, u]
            hist.nxt[t] = nx
            hist.krow[t] = row
            g = G[w_flow[i]] if scheme.mode == "common" else mixture
            nm = np.einsum("x,xu,xuy->y", mu, g, K)
            mu = nm / nm.sum()
            x = nx
        state["mu"], state["x"] = mu, x

    lm, visits, hist, curve, rel = _sa_driver(basis, n, a, steps, segment, set(checkpoints), backend)
    return _learn_result(lm, visits, hist, curve, rel, threshold,
                         {"method": "independent_learn_infinite", "steps": steps, "eps_floor": eps_floor,
                          "mode": scheme.mode, "seed": seed})


def independent_learn_finite(model: FiniteMFCModel, N: int, basis: BasisFamily, scheme: ExplorationScheme,
                             steps: int, seed: int = 0, pop0=None, learner: int = 0,
                             eps_floor: float = 0.05, checkpoints=(), threshold: float = 1e-2,
                             backend: Optional[str] = None) -> LearnResult:
    """Online learning by agent ``learner`` of an N-agent team.

    All N agents are simulated; the learner applies the same update as in
    independent_learn_infinite, with the empirical measure in place of the flow.
    Kernel and cost tables are cached per empirical measure (there are finitely
    many).
    """
    if N < 1:
        raise UsageError("N must be positive")
    n, a = model.n_states, model.n_actions
    rng = make_rng(seed, "learn-finite")
    G = scheme.floored(eps_floor)
    W = G.shape[0]
    flatG = G.reshape(W * n, a)
    gcdf = np.cumsum(flatG, axis=1)
    gcdf[:, -1] = 1.0
    if pop0 is None:
        pop0 = np.arange(N) % n
    state = {"x": np.asarray(pop0, dtype=np.int64).copy()}
    if state["x"].size != N:
        raise UsageError("initial population has the wrong size")
    cache = {}

    def tables(counts):
        key = counts.tobytes()
        hit = cache.get(key)
        if hit is None:
            mu = counts / N
            K = model.kernel_table(mu)
            kc = np.cumsum(K.reshape(n * a, n), axis=1)
            kc[:, -1] = 1.0
            hit = (mu, K, model.cost_table(mu), np.ascontiguousarray(kc))
            cache[key] = hit
        return hit

    def segment(lo, hi, hist):
        x = state["x"]
        for t in range(lo, hi):
            counts = np.bincount(x, minlength=n)
            mu, K, C, kc = tables(counts)
            if scheme.mode == "common":
                w = np.full(N, rng.choice(W, p=scheme.probs))
            else:
                w = rng.choice(W, size=N, p=scheme.probs)
            u = kernels.sample_inverse_cdf(gcdf, w * n + x, rng.random(N))
            nx = kernels.sample_inverse_cdf(kc, x * a + u, rng.random(N))
            xl, ul = x[learner], u[learner]
            hist.mus[t] = mu
            hist.xu[t] = xl * a + ul
            hist.cost[t] = C[xl, ul]
            hist.nxt[t] = nx[learner]
            hist.krow[t] = K[xl, ul]
            x = nx
        state["x"] = x

    lm, visits, hist, curve, rel = _sa_driver(basis, n, a, steps, segment, set(checkpoints), backend)
    return _learn_result(lm, visits, hist, curve, rel, threshold,
                         {"method": "independent_learn_finite", "N": N, "steps": steps,
                          "eps_floor": eps_floor, "mode": scheme.mode, "seed": seed})
