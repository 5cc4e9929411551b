"""Linear-in-features models of the cost and kernel, the indicator
(discretization) basis, and uniform error certificates for a fit."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .model import FiniteMFCModel
from .simplex import SimplexGrid, UsageError, as_measure, build_grid, lattice_points

MASS_FLOOR = 1e-9


@dataclass(frozen=True)
class BasisFamily:
    """Features Phi_(x,u)(mu). The built-in families use the same features for
    every (x, u); ``batch(mus)`` maps an (M, |X|) array to (M, d)."""

    d: int
    n_states: int
    n_actions: int
    batch: Callable[[np.ndarray], np.ndarray]
    lipschitz_bound: Optional[float]
    descriptor: dict

    def eval(self, x: int, u: int, mu) -> np.ndarray:
        if not (0 <= x < self.n_states and 0 <= u < self.n_actions):
            raise UsageError(f"(x={x}, u={u}) out of range")
        return self.batch(np.asarray(mu, dtype=np.float64)[None, :])[0]

    def table(self, mu) -> np.ndarray:
        """Features for every (x, u): shape (|X|, |U|, d)."""
        phi = self.batch(np.asarray(mu, dtype=np.float64)[None, :])[0]
        return np.broadcast_to(phi, (self.n_states, self.n_actions, self.d))


def polynomial_basis(n_states: int, n_actions: int, degree: int = 2) -> BasisFamily:
    """Bernstein polynomials of the given degree on the simplex.

    b_a(mu) = degree!/prod(a_i!) * prod(mu_i^a_i) over multi-indices |a| = degree.
    They span every polynomial of degree <= ``degree`` in mu, lie in [0, 1], sum
    to one, and are ``degree``-Lipschitz in total variation.
    """
    if degree < 1:
        raise UsageError("degree must be >= 1")
    alphas = lattice_points(n_states, degree)
    coef = np.array([math.factorial(degree) / math.prod(math.factorial(int(a)) for a in row)
                     for row in alphas])

    def batch(mus):
        mus = np.asarray(mus, dtype=np.float64)
        return coef * np.prod(mus[:, None, :] ** alphas[None, :, :], axis=2)

    return BasisFamily(
        alphas.shape[0], n_states, n_actions, batch, float(degree),
        {"name": "polynomial", "n_states": n_states, "n_actions": n_actions, "degree": degree},
    )


def indicator_basis(grid: SimplexGrid, n_actions: int = 2) -> BasisFamily:
    """One feature per grid bin: Phi^i(mu) = 1 iff mu falls in bin i."""

    def batch(mus):
        idx, _ = grid.project_many(np.asarray(mus, dtype=np.float64))
        out = np.zeros((idx.size, grid.size))
        out[np.arange(idx.size), idx] = 1.0
        return out

    return BasisFamily(
        grid.size, grid.n, n_actions, batch, None,
        {"name": "indicator", "n_states": grid.n, "n_actions": n_actions, "resolution": grid.resolution},
    )


def make_basis(desc: dict) -> BasisFamily:
    name = desc.get("name")
    try:
        if name == "polynomial":
            return polynomial_basis(int(desc["n_states"]), int(desc["n_actions"]), int(desc.get("degree", 2)))
        if name == "indicator":
            grid = build_grid(int(desc["n_states"]), int(desc["resolution"]))
            return indicator_basis(grid, int(desc["n_actions"]))
    except KeyError as exc:
        raise UsageError(f"basis descriptor lacks key {exc}") from None
    raise UsageError(f"unknown basis {name!r}; choose 'polynomial' or 'indicator'")


def basis_rank(basis: BasisFamily, grid: SimplexGrid) -> int:
    return int(np.linalg.matrix_rank(basis.batch(grid.representatives)))


# ------------------------------------------------------------ linear model

def normalize_to_measure(sm) -> np.ndarray:
    """Clip negatives and renormalize; uniform if almost no mass survives."""
    w = np.clip(np.asarray(sm, dtype=np.float64), 0.0, None)
    s = w.sum()
    if s < MASS_FLOOR:
        return as_measure(np.full(w.size, 1.0 / w.size))
    if s == 1.0:
        return as_measure(w)
    return as_measure(w / s)


def normalize_rows(table) -> np.ndarray:
    """normalize_to_measure applied along the last axis."""
    w = np.clip(np.asarray(table, dtype=np.float64), 0.0, None)
    s = w.sum(axis=-1, keepdims=True)
    n = w.shape[-1]
    out = np.where(s < MASS_FLOOR, 1.0 / n, w / np.where(s < MASS_FLOOR, 1.0, s))
    return out


@dataclass
class LinearModel:
    """c(x,u,mu) ~ Phi(mu) . theta[x,u] and T(.|x,u,mu) ~ Phi(mu) @ q[x,u]."""

    basis: BasisFamily
    theta: np.ndarray  # (|X|, |U|, d)
    q: np.ndarray  # (|X|, |U|, d, |X|)
    unlearned: np.ndarray = None  # (|X|, |U|) bool
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        b = self.basis
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.q = np.asarray(self.q, dtype=np.float64)
        if self.theta.shape != (b.n_states, b.n_actions, b.d):
            raise UsageError(f"theta shape {self.theta.shape} does not match basis")
        if self.q.shape != (b.n_states, b.n_actions, b.d, b.n_states):
            raise UsageError(f"q shape {self.q.shape} does not match basis")
        if self.unlearned is None:
            self.unlearned = np.zeros((b.n_states, b.n_actions), dtype=bool)

    @property
    def n_states(self) -> int:
        return self.basis.n_states

    @property
    def n_actions(self) -> int:
        return self.basis.n_actions

    def cost_table(self, mu) -> np.ndarray:
        phi = self.basis.batch(np.asarray(mu, dtype=np.float64)[None, :])[0]
        return self.theta @ phi

    def kernel_table(self, mu) -> np.ndarray:
        """Signed rows; may be negative or not sum to one."""
        phi = self.basis.batch(np.asarray(mu, dtype=np.float64)[None, :])[0]
        return np.einsum("d,xudy->xuy", phi, self.q)

    def as_model(self) -> FiniteMFCModel:
        """Simulable dynamics: kernel rows projected with normalize_to_measure."""
        return FiniteMFCModel(
            self.n_states, self.n_actions,
            lambda mu: normalize_rows(self.kernel_table(mu)),
            self.cost_table,
            "linear-fit",
            {"basis": self.basis.descriptor},
        )

    def projection_distance(self, grid: SimplexGrid) -> float:
        """Largest tv between a signed kernel row and its projection, over the grid."""
        worst = 0.0
        for mu in grid.representatives:
            k = self.kernel_table(mu)
            worst = max(worst, float((0.5 * np.abs(k - normalize_rows(k)).sum(-1)).max()))
        return worst

    def to_json(self) -> dict:
        return {
            "basis": self.basis.descriptor,
            "theta": self.theta.tolist(),
            "q": self.q.tolist(),
            "unlearned": self.unlearned.tolist(),
            "info": self.info,
        }

    @classmethod
    def from_json(cls, data: dict) -> "LinearModel":
        basis = make_basis(data["basis"])
        return cls(basis, np.array(data["theta"]), np.array(data["q"]),
                   np.array(data.get("unlearned"), dtype=bool) if data.get("unlearned") is not None else None,
                   dict(data.get("info", {})))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path) -> "LinearModel":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def eval_linear_cost(lm: LinearModel, x: int, u: int, mu) -> float:
    return float(lm.basis.eval(x, u, mu) @ lm.theta[x, u])


def eval_linear_kernel(lm: LinearModel, x: int, u: int, mu) -> np.ndarray:
    return lm.basis.eval(x, u, mu) @ lm.q[x, u]


def exact_linear_model(basis: BasisFamily, theta_bar, q_bar, name: str = "exact_linear",
                       params: dict | None = None) -> FiniteMFCModel:
    """The model whose cost and kernel are exactly Phi.theta_bar and Phi @ q_bar.
    Kernel rows must be probabilities for every mu; the caller guarantees that
    (see random_exact_linear_model)."""
    lm = LinearModel(basis, theta_bar, q_bar)
    model = FiniteMFCModel(basis.n_states, basis.n_actions, lm.kernel_table, lm.cost_table, name,
                           params or {})
    model.known.update(theta_bar=lm.theta, q_bar=lm.q, basis=basis)
    return model


def random_exact_linear_model(n_states: int = 2, n_actions: int = 2, degree: int = 1,
                              seed: int = 0, sticky: float = 0.0) -> FiniteMFCModel:
    """Random model exactly linear in the polynomial basis.

    Each feature gets a probability vector as its kernel coefficient, so the
    kernel is a convex mixture of those vectors and always valid. ``sticky``
    blends those vectors toward the chosen action's state (u mod |X|).
    """
    basis = polynomial_basis(n_states, n_actions, degree)
    rng = np.random.default_rng(seed)
    theta = rng.uniform(0, 1, size=(n_states, n_actions, basis.d))
    q = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions, basis.d))
    if sticky:
        target = np.eye(n_states)[np.arange(n_actions) % n_states]  # (U, X)
        q = (1 - sticky) * q + sticky * target[None, :, None, :]
    return exact_linear_model(basis, theta, q, params={
        "n_states": n_states, "n_actions": n_actions, "degree": degree, "seed": seed, "sticky": sticky})


# ------------------------------------------------------------ certificates

@dataclass
class Certificate:
    """Per-(x, u) measured and certified uniform errors."""

    measured_cost: np.ndarray  # sup over the fine grid of |c - c_hat|
    measured_kernel: np.ndarray  # sup of tv(T, T_hat)
    l2_cost: np.ndarray  # root-mean-square residual under P
    l2_kernel: np.ndarray  # RMS of tv residual under P
    l1_cost: np.ndarray
    l1_kernel: np.ndarray
    kappa: np.ndarray  # min over covered grid points of P(B_sqrt(eps)) / sqrt(eps)
    uncovered: np.ndarray  # fine-grid points (indices) with P(B_r) = 0
    bound_cost: Optional[np.ndarray] = None
    bound_kernel: Optional[np.ndarray] = None
    pointwise_ok: Optional[bool] = None
    constant_cost: Optional[np.ndarray] = None
    constant_kernel: Optional[np.ndarray] = None
    label: str = "proof-derived constant"

    def to_json(self) -> dict:
        out = {}
        for k, v in self.__dict__.items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return out


def _residuals(lm, model, mus):
    ec = np.empty((len(mus),) + lm.theta.shape[:2])
    ek = np.empty_like(ec)
    for j, mu in enumerate(mus):
        ec[j] = np.abs(model.cost_table(mu) - lm.cost_table(mu))
        ek[j] = 0.5 * np.abs(model.kernel_table(mu) - lm.kernel_table(mu)).sum(-1)
    return ec, ek


def uniform_error_certificate(lm: LinearModel, model: FiniteMFCModel, grid_fine: SimplexGrid,
                              train_mus, r: float, reference=None) -> Certificate:
    """Measured sup errors of a fit and, given the reference linear model, a
    certified pointwise bound.

    ``reference = (theta_bar, q_bar, eps)`` is a linear model whose uniform
    misfit is at most eps. With ``f = Phi . (theta_bar - theta)``, f is
    L*||theta_bar - theta||_1-Lipschitz and integrates (in absolute value) to at
    most eps + ||c - c_hat||_{L1(P)}, so averaging over the ball B_r(mu) gives

        |c - c_hat|(mu) <= eps + (eps + l1) / P(B_r(mu)) + L ||dtheta||_1 r
                        <= eps + K ((eps + l1) / P(B_r(mu)) + r),

    with K = max(1, L ||dtheta||_1). The kernel is handled the same way with
    ||dq|| = 1/2 sum |q_bar - q|. ``r`` is the ball radius in tv.
    """
    if r <= 0:
        raise UsageError("ball radius r must be positive")
    train_mus = np.asarray(train_mus, dtype=np.float64)
    pts = grid_fine.representatives
    mc, mk = _residuals(lm, model, pts)
    tc, tk = _residuals(lm, model, train_mus)
    l2c = np.sqrt((tc**2).mean(0))
    l2k = np.sqrt((tk**2).mean(0))
    l1c = tc.mean(0)
    l1k = tk.mean(0)
    dist = 0.5 * np.abs(pts[:, None, :] - train_mus[None, :, :]).sum(-1)  # (G, M)
    mass_r = (dist < r).mean(1)
    uncovered = np.flatnonzero(mass_r == 0)
    eps = np.maximum(l2c, l2k)
    kappa = np.empty_like(eps)
    for idx in np.ndindex(eps.shape):
        s = math.sqrt(eps[idx]) if eps[idx] > 0 else 0.0
        if s == 0:
            kappa[idx] = np.inf
        else:
            pb = (dist < s).mean(1)
            kappa[idx] = float(pb.min() / s)
    cert = Certificate(mc.max(0), mk.max(0), l2c, l2k, l1c, l1k, kappa, uncovered)
    if reference is None or lm.basis.lipschitz_bound is None:
        return cert
    theta_bar, q_bar, eps_u = reference
    L = lm.basis.lipschitz_bound
    dth = np.abs(np.asarray(theta_bar) - lm.theta).sum(-1)
    dq = 0.5 * np.abs(np.asarray(q_bar) - lm.q).sum(axis=(-2, -1))
    Kc = np.maximum(1.0, L * dth)
    Kk = np.maximum(1.0, L * dq)
    covered = mass_r > 0
    with np.errstate(divide="ignore"):
        inv = np.where(covered, 1.0 / np.where(covered, mass_r, 1.0), np.inf)
    bc = eps_u + Kc[None] * ((eps_u + l1c)[None] * inv[:, None, None] + r)
    bk = eps_u + Kk[None] * ((eps_u + l1k)[None] * inv[:, None, None] + r)
    ok = bool(np.all(mc[covered] <= bc[covered] + 1e-12) and np.all(mk[covered] <= bk[covered] + 1e-12))
    cert.bound_cost = bc[covered].max(0) if covered.any() else np.full(Kc.shape, np.inf)
    cert.bound_kernel = bk[covered].max(0) if covered.any() else np.full(Kk.shape, np.inf)
    cert.pointwise_ok = ok
    cert.constant_cost = Kc
    cert.constant_kernel = Kk
    return cert
