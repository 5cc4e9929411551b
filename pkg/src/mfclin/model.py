"""Finite mean-field control models, a small gallery, and the structural
constants (Lipschitz moduli, sup of the cost, Dobrushin coefficient, model
mismatch) that enter the performance bounds."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import Callable, Optional

import numpy as np

from . import kernels
from .simplex import SimplexGrid, UsageError, as_measure, build_grid, tv_distance

STOCHASTIC_TOL = 1e-9


class ModelIntegrityError(ValueError):
    """A model evaluator returned something that is not a stochastic row."""


class BoundInapplicable(ValueError):
    """beta * K >= 1, so the contraction-based bounds do not apply."""


@dataclass(frozen=True)
class FiniteMFCModel:
    """Kernel and cost evaluated for all (x, u) at once.

    ``kernel_fn(mu)`` returns an array of shape (|X|, |U|, |X|) whose last axis
    is T(.|x,u,mu); ``cost_fn(mu)`` returns shape (|X|, |U|). An optional
    ``sampler_fn(x, u, mu, w)`` maps a uniform draw w to the next state; by
    default the inverse CDF of the kernel row is used.
    """

    n_states: int
    n_actions: int
    kernel_fn: Callable[[np.ndarray], np.ndarray]
    cost_fn: Callable[[np.ndarray], np.ndarray]
    name: str = "custom"
    params: dict = field(default_factory=dict)
    sampler_fn: Optional[Callable] = None
    known: dict = field(default_factory=dict)

    def kernel_table(self, mu) -> np.ndarray:
        return np.asarray(self.kernel_fn(np.asarray(mu, dtype=np.float64)), dtype=np.float64)

    def cost_table(self, mu) -> np.ndarray:
        return np.asarray(self.cost_fn(np.asarray(mu, dtype=np.float64)), dtype=np.float64)

    def sample(self, x: int, u: int, mu, w: float) -> int:
        if self.sampler_fn is not None:
            return int(self.sampler_fn(x, u, mu, w))
        row = self.kernel_table(mu)[x, u]
        return int(sample_rows(row[None, :], np.zeros(1, dtype=np.int64), np.array([w]))[0])

    def spec(self) -> dict:
        return {"name": self.name, "params": self.params}


def sample_rows(rows, which, w):
    """Inverse-CDF draws: for each i, a category from ``rows[which[i]]`` using w[i]."""
    cdf = np.cumsum(rows, axis=-1)
    cdf[:, -1] = 1.0
    return kernels.sample_inverse_cdf(cdf, which, w)


def sample_next(model: FiniteMFCModel, xs, us, mu, w, table=None) -> np.ndarray:
    """Next states for a batch of (x, u) pairs sharing the same mean-field term."""
    xs = np.asarray(xs, dtype=np.int64)
    us = np.asarray(us, dtype=np.int64)
    if model.sampler_fn is not None:
        return np.array([model.sampler_fn(x, u, mu, wi) for x, u, wi in zip(xs, us, w)], dtype=np.int64)
    if table is None:
        table = model.kernel_table(mu)
    flat = table.reshape(model.n_states * model.n_actions, model.n_states)
    return sample_rows(flat, xs * model.n_actions + us, w)


def _check_index(model, x, u):
    if not (0 <= x < model.n_states and 0 <= u < model.n_actions):
        raise UsageError(f"(x={x}, u={u}) out of range")


def eval_kernel(model: FiniteMFCModel, x: int, u: int, mu) -> np.ndarray:
    _check_index(model, x, u)
    mu = as_measure(mu)
    row = model.kernel_table(mu)[x, u]
    if np.any(~np.isfinite(row)) or np.any(row < -STOCHASTIC_TOL) or abs(row.sum() - 1) > STOCHASTIC_TOL:
        raise ModelIntegrityError(f"{model.name}: kernel row at (x={x}, u={u}) is not stochastic: {row}")
    return as_measure(np.clip(row, 0, None))


def eval_cost(model: FiniteMFCModel, x: int, u: int, mu) -> float:
    _check_index(model, x, u)
    mu = as_measure(mu)
    c = float(model.cost_table(mu)[x, u])
    if not np.isfinite(c):
        raise ModelIntegrityError(f"{model.name}: cost at (x={x}, u={u}) is not finite")
    return c


def check_model(model: FiniteMFCModel, grid: SimplexGrid) -> None:
    """Validate every kernel row and cost on the grid representatives."""
    for mu in grid.representatives:
        for x in range(model.n_states):
            for u in range(model.n_actions):
                eval_kernel(model, x, u, mu)
                eval_cost(model, x, u, mu)


# ---------------------------------------------------------------- constants

@dataclass(frozen=True)
class ModelConstants:
    k_f: float
    k_c: float
    c_sup: float
    delta_t: float
    source: str = "grid-estimated"

    @property
    def c_const(self) -> float:
        return self.c_sup + self.k_c

    @property
    def k_const(self) -> float:
        return self.k_f + self.delta_t

    def check_contraction(self, beta: float) -> None:
        if beta * self.k_const >= 1:
            raise BoundInapplicable(
                f"beta*K = {beta}*{self.k_const:.6g} = {beta * self.k_const:.6g} >= 1; "
                "lower beta or use a model with smaller K_f + delta_T"
            )

    def to_json(self) -> dict:
        d = asdict(self)
        d["c_const"] = self.c_const
        d["k_const"] = self.k_const
        return d


def _tables(model, grid):
    K = np.stack([model.kernel_table(mu) for mu in grid.representatives])
    C = np.stack([model.cost_table(mu) for mu in grid.representatives])
    return K, C


def estimate_lipschitz_constants(model: FiniteMFCModel, grid: SimplexGrid) -> tuple[float, float]:
    """Largest difference quotients over pairs of grid representatives.

    A lower estimate of the true Lipschitz moduli (exact when the kernel and
    cost are affine in mu, since the quotient is then maximized at vertices).
    """
    if grid.resolution < 2:
        raise UsageError("Lipschitz estimation needs grid resolution >= 2")
    K, C = _tables(model, grid)
    reps = grid.representatives
    B = reps.shape[0]
    k_f = k_c = 0.0
    for i in range(B - 1):
        d = 0.5 * np.abs(reps[i + 1:] - reps[i]).sum(axis=1)
        dk = 0.5 * np.abs(K[i + 1:] - K[i]).sum(axis=-1).max(axis=(1, 2))
        dc = np.abs(C[i + 1:] - C[i]).max(axis=(1, 2))
        k_f = max(k_f, float((dk / d).max()))
        k_c = max(k_c, float((dc / d).max()))
    return k_f, k_c


def _dobrushin_at(table, n_states, n_actions):
    rows = table.reshape(n_states * n_actions, n_states)
    d = 0.5 * np.abs(rows[:, None, :] - rows[None, :, :]).sum(axis=-1)
    xs = np.repeat(np.arange(n_states), n_actions)
    # a shared policy uses one action distribution per state, so pairs with
    # x == x_hat contribute zero
    d[xs[:, None] == xs[None, :]] = 0.0
    return float(d.max())


def estimate_dobrushin(model: FiniteMFCModel, grid: SimplexGrid) -> float:
    """max over grid mu and over (x, u), (x_hat, u_hat) with x != x_hat of
    tv(T(.|x,u,mu), T(.|x_hat,u_hat,mu)), clamped to 1.

    tv is convex in each argument, so randomized policies cannot beat the best
    deterministic action pair.
    """
    best = 0.0
    for mu in grid.representatives:
        best = max(best, _dobrushin_at(model.kernel_table(mu), model.n_states, model.n_actions))
    return min(best, 1.0)


def estimate_cost_sup(model: FiniteMFCModel, grid: SimplexGrid) -> float:
    return float(max(np.abs(model.cost_table(mu)).max() for mu in grid.representatives))


def estimate_constants(model: FiniteMFCModel, grid: SimplexGrid) -> ModelConstants:
    k_f, k_c = estimate_lipschitz_constants(model, grid)
    return ModelConstants(
        k_f=k_f,
        k_c=k_c,
        c_sup=estimate_cost_sup(model, grid),
        delta_t=estimate_dobrushin(model, grid),
    )


def uniform_mismatch(model_true, model_hat, grid: SimplexGrid) -> float:
    """max over grid mu and (x, u) of max(|c - c_hat|, tv(T, T_hat)).

    ``model_hat`` may have signed kernel rows (an unprojected linear fit).
    """
    if (model_true.n_states, model_true.n_actions) != (model_hat.n_states, model_hat.n_actions):
        raise UsageError("models have different state/action cardinalities")
    lam = 0.0
    for mu in grid.representatives:
        dc = np.abs(model_true.cost_table(mu) - model_hat.cost_table(mu)).max()
        dk = 0.5 * np.abs(model_true.kernel_table(mu) - model_hat.kernel_table(mu)).sum(axis=-1).max()
        lam = max(lam, float(dc), float(dk))
    return lam


# ------------------------------------------------------------------ gallery

def identity_model(n_states: int = 2, n_actions: int = 2, cost: float = 0.0) -> FiniteMFCModel:
    """Next state = current state; constant cost."""
    table = np.zeros((n_states, n_actions, n_states))
    for x in range(n_states):
        table[x, :, x] = 1.0
    ctab = np.full((n_states, n_actions), float(cost))
    return FiniteMFCModel(
        n_states, n_actions, lambda mu: table, lambda mu: ctab, "identity",
        {"n_states": n_states, "n_actions": n_actions, "cost": cost},
        known={"k_f": 0.0, "k_c": 0.0, "c_sup": abs(cost), "delta_t": 1.0 if n_states > 1 else 0.0},
    )


def constant_model(nu, n_actions: int = 2, cost: float = 0.0) -> FiniteMFCModel:
    """T(.|x,u,mu) = nu for every input; constant cost."""
    nu = as_measure(nu)
    n = nu.size
    table = np.broadcast_to(nu, (n, n_actions, n)).copy()
    ctab = np.full((n, n_actions), float(cost))
    return FiniteMFCModel(
        n, n_actions, lambda mu: table, lambda mu: ctab, "constant",
        {"nu": nu.tolist(), "n_actions": n_actions, "cost": cost},
        known={"k_f": 0.0, "k_c": 0.0, "c_sup": abs(cost), "delta_t": 0.0},
    )


def mixture_model(nu, n_actions: int = 2, weight: float = 0.5, cost_slope: float = 0.0,
                  cost_offset: float = 0.0) -> FiniteMFCModel:
    """T(.|x,u,mu) = weight*nu + (1-weight)*mu and c(x,u,mu) = cost_offset + cost_slope*mu(0)."""
    nu = as_measure(nu)
    n = nu.size

    def kernel(mu):
        return np.broadcast_to(weight * nu + (1 - weight) * mu, (n, n_actions, n)).copy()

    def cost(mu):
        return np.full((n, n_actions), cost_offset + cost_slope * mu[0])

    # |mu(0) - mu'(0)| <= tv(mu, mu'), with equality between two vertices
    return FiniteMFCModel(
        n, n_actions, kernel, cost, "mixture",
        {"nu": nu.tolist(), "n_actions": n_actions, "weight": weight,
         "cost_slope": cost_slope, "cost_offset": cost_offset},
        known={"k_f": 1 - weight, "k_c": abs(cost_slope) if n > 1 else 0.0,
               "c_sup": max(abs(cost_offset), abs(cost_offset + cost_slope)), "delta_t": 0.0},
    )


def decentralization_model(penalty: float = 10.0, tol: float = 1e-12) -> FiniteMFCModel:
    """Two states, two actions, next state = action. Cost is zero exactly when
    mu is (1/2, 1/2) or the point mass on state 0, and ``penalty`` otherwise."""
    table = np.zeros((2, 2, 2))
    table[:, 0, 0] = 1.0
    table[:, 1, 1] = 1.0
    half = np.array([0.5, 0.5])
    zero = np.array([1.0, 0.0])

    def cost(mu):
        ok = tv_distance(mu, half) <= tol or tv_distance(mu, zero) <= tol
        return np.full((2, 2), 0.0 if ok else penalty)

    return FiniteMFCModel(
        2, 2, lambda mu: table, cost, "decentralization", {"penalty": penalty},
        known={"c_sup": penalty, "delta_t": 1.0, "k_f": 0.0},
    )


def affine_model(p0, p1, c0, w, mix: float) -> FiniteMFCModel:
    """T(.|x,u,mu) = (1-mix) p0[x,u] + mix * sum_y mu(y) p1[x,u,y];
    c(x,u,mu) = c0[x,u] + sum_y mu(y) w[x,u,y].

    Both are affine in mu, so every supremum defining the constants is
    attained at vertices of the simplex and the analytic values below are exact.
    """
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    c0 = np.asarray(c0, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, a = c0.shape

    def kernel(mu):
        return (1 - mix) * p0 + mix * np.einsum("y,xuyz->xuz", mu, p1)

    def cost(mu):
        return c0 + w @ mu

    pair_tv = 0.5 * np.abs(p1[:, :, :, None, :] - p1[:, :, None, :, :]).sum(-1)
    vertex_cost = c0[:, :, None] + w
    model = FiniteMFCModel(
        n, a, kernel, cost, "affine",
        {"p0": p0.tolist(), "p1": p1.tolist(), "c0": c0.tolist(), "w": w.tolist(), "mix": mix},
    )
    vert = build_grid(n, 1)
    delta = max(_dobrushin_at(kernel(v), n, a) for v in vert.representatives)
    model.known.update(
        k_f=float(mix * pair_tv.max()),
        k_c=float((w.max(axis=2) - w.min(axis=2)).max()),
        c_sup=float(np.abs(vertex_cost).max()),
        delta_t=float(min(delta, 1.0)),
    )
    return model


def random_affine_model(n_states: int = 2, n_actions: int = 2, seed: int = 0, mix: float = 0.5,
                        cost_spread: float = 1.0, sticky: float = 0.0) -> FiniteMFCModel:
    """Random member of the affine family. ``sticky`` in [0, 1) pulls the base
    kernel toward staying put."""
    rng = np.random.default_rng(seed)
    p0 = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    if sticky:
        p0 = (1 - sticky) * p0 + sticky * np.eye(n_states)[:, None, :]
    p1 = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions, n_states))
    c0 = rng.uniform(0, 1, size=(n_states, n_actions))
    w = rng.uniform(-cost_spread, cost_spread, size=(n_states, n_actions, n_states))
    m = affine_model(p0, p1, c0, w, mix)
    return FiniteMFCModel(
        m.n_states, m.n_actions, m.kernel_fn, m.cost_fn, "random_affine",
        {"n_states": n_states, "n_actions": n_actions, "seed": seed, "mix": mix,
         "cost_spread": cost_spread, "sticky": sticky},
        known=m.known,
    )


def crowd_model(n_states: int = 2, base_noise: float = 0.2, crowd_noise: float = 0.3,
                crowd_cost: float = 1.0, move_cost: float = 0.2) -> FiniteMFCModel:
    """Actions pick a target state. The move succeeds unless a slip, of
    probability base_noise + crowd_noise*mu(target), sends the agent to a
    uniform state. Cost = crowd_cost*mu(x) + move_cost*[u != x]."""
    n = n_states
    eye = np.eye(n)
    unif = np.full(n, 1.0 / n)
    move = move_cost * (1 - eye)

    def kernel(mu):
        slip = base_noise + crowd_noise * mu  # indexed by target u
        return np.broadcast_to(
            (1 - slip)[:, None] * eye + slip[:, None] * unif, (n, n, n)
        ).copy()

    def cost(mu):
        return crowd_cost * mu[:, None] + move

    verts = build_grid(n, 1).representatives
    delta = max(_dobrushin_at(kernel(v), n, n) for v in verts)
    return FiniteMFCModel(
        n, n, kernel, cost, "crowd",
        {"n_states": n, "base_noise": base_noise, "crowd_noise": crowd_noise,
         "crowd_cost": crowd_cost, "move_cost": move_cost},
        known={"k_f": crowd_noise * (1 - 1.0 / n), "k_c": abs(crowd_cost),
               "c_sup": abs(crowd_cost) + abs(move_cost), "delta_t": min(delta, 1.0)},
    )


def perturbed_model(model: FiniteMFCModel, cost_shift: float = 0.0, kernel_weight: float = 0.0,
                    seed: int = 0) -> FiniteMFCModel:
    """c_hat = c + cost_shift * s[x,u] with s in [-1, 1]; T_hat = (1-kernel_weight) T + kernel_weight R[x,u].

    The mismatch is at most max(|cost_shift|, kernel_weight).
    """
    rng = np.random.default_rng(seed)
    n, a = model.n_states, model.n_actions
    s = rng.uniform(-1, 1, size=(n, a))
    R = rng.dirichlet(np.ones(n), size=(n, a))

    def kernel(mu):
        return (1 - kernel_weight) * model.kernel_table(mu) + kernel_weight * R

    def cost(mu):
        return model.cost_table(mu) + cost_shift * s

    return FiniteMFCModel(
        n, a, kernel, cost, "perturbed",
        {"base": model.spec(), "cost_shift": cost_shift, "kernel_weight": kernel_weight, "seed": seed},
    )


def tabulated_model(grid: SimplexGrid, kernel, cost, name: str = "tabulated") -> FiniteMFCModel:
    """Piecewise-constant model: look up the tables at the bin of mu."""
    kernel = np.asarray(kernel, dtype=np.float64)
    cost = np.asarray(cost, dtype=np.float64)
    if kernel.ndim != 4 or kernel.shape[0] != grid.size or kernel.shape[1] != grid.n or kernel.shape[3] != grid.n:
        raise UsageError(f"kernel table must have shape (bins, |X|, |U|, |X|), got {kernel.shape}")
    if cost.shape != kernel.shape[:3]:
        raise UsageError(f"cost table must have shape {kernel.shape[:3]}, got {cost.shape}")
    if np.any(kernel < 0) or not np.allclose(kernel.sum(-1), 1.0, atol=STOCHASTIC_TOL):
        raise ModelIntegrityError("tabulated kernel rows must be probability vectors")
    return FiniteMFCModel(
        grid.n, kernel.shape[2],
        lambda mu: kernel[grid.project(mu)],
        lambda mu: cost[grid.project(mu)],
        name,
        {"resolution": grid.resolution},
    )


def load_tabulated(path) -> FiniteMFCModel:
    with open(path) as fh:
        data = json.load(fh)
    try:
        grid = build_grid(int(data["cardinality"]), int(data["resolution"]))
        return tabulated_model(grid, data["kernel"], data["cost"])
    except KeyError as exc:
        raise UsageError(f"tabulated model file {path} lacks key {exc}") from None


GALLERY = {
    "identity": identity_model,
    "constant": constant_model,
    "mixture": mixture_model,
    "decentralization": decentralization_model,
    "random_affine": random_affine_model,
    "crowd": crowd_model,
}


def make_model(spec: dict) -> FiniteMFCModel:
    """Build a model from ``{"name": ..., "params": {...}}`` or ``{"tabulated": path}``.

    ``exact_linear`` is handled in :mod:`mfclin.linfa` because it needs a basis.
    """
    if "tabulated" in spec:
        return load_tabulated(spec["tabulated"])
    name = spec.get("name")
    params = dict(spec.get("params") or {})
    if name == "exact_linear":
        from .linfa import random_exact_linear_model
        return random_exact_linear_model(**params)
    if name == "perturbed":
        base = make_model(params.pop("base"))
        return perturbed_model(base, **params)
    if name not in GALLERY:
        raise UsageError(f"unknown model {name!r}; choose from {sorted(GALLERY) + ['exact_linear', 'perturbed']}")
    try:
        return GALLERY[name](**params)
    except TypeError as exc:
        raise UsageError(f"bad parameters for model {name!r}: {exc}") from None
