"""Probability vectors on finite sets, the total-variation metric and simplex grids."""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from math import comb

import numpy as np

from . import kernels

MASS_TOL = 1e-12
RENORM_TOL = 1e-9


class UsageError(ValueError):
    """Bad arguments to a library call (shape, range, domain)."""


def as_measure(weights, tol: float = RENORM_TOL) -> np.ndarray:
    """Validate a probability vector and return a read-only float copy.

    Inputs whose mass is within ``tol`` of one are renormalized; anything else
    (negative entries, non-finite values, wrong mass) is rejected.
    """
    w = np.array(weights, dtype=np.float64, copy=True).reshape(-1)
    if w.size == 0 or not np.all(np.isfinite(w)):
        raise UsageError("measure must be a nonempty finite vector")
    if np.any(w < -MASS_TOL):
        raise UsageError(f"measure has negative weight {w.min():.3g}")
    w[w < 0] = 0.0
    s = w.sum()
    if abs(s - 1.0) > tol:
        raise UsageError(f"measure mass {s!r} is not 1")
    if abs(s - 1.0) > MASS_TOL:
        w /= s
    w.flags.writeable = False
    return w


def as_signed(weights) -> np.ndarray:
    w = np.array(weights, dtype=np.float64, copy=True).reshape(-1)
    if not np.all(np.isfinite(w)):
        raise UsageError("signed measure must have finite entries")
    return w


def dirac(n: int, x: int) -> np.ndarray:
    w = np.zeros(n)
    w[x] = 1.0
    return as_measure(w)


def uniform(n: int) -> np.ndarray:
    return as_measure(np.full(n, 1.0 / n))


def _check_pair(mu, nu):
    mu = np.asarray(mu, dtype=np.float64)
    nu = np.asarray(nu, dtype=np.float64)
    if mu.shape != nu.shape:
        raise UsageError(f"dimension mismatch {mu.shape} vs {nu.shape}")
    return mu, nu


def tv_distance(mu, nu) -> float:
    """Total variation, half the l1 distance. Also accepts signed vectors."""
    mu, nu = _check_pair(mu, nu)
    return float(0.5 * np.sum(np.abs(mu - nu)))


def optimal_coupling(mu, nu) -> np.ndarray:
    """A coupling minimizing P(X != Y): keep min(mu, nu) on the diagonal and
    move the excess of mu onto the deficit of nu proportionally."""
    mu, nu = _check_pair(mu, nu)
    diff = mu - nu
    excess = np.maximum(diff, 0.0)
    deficit = np.maximum(-diff, 0.0)
    plan = np.diag(np.minimum(mu, nu))
    moved = excess.sum()
    if moved > 0:
        plan += np.outer(excess, deficit) / moved
    return plan


def wasserstein1_discrete(mu, nu) -> float:
    """W1 under the 0/1 ground metric, read off the optimal coupling.

    The off-diagonal mass leaves mu through ``excess`` and arrives at nu through
    ``deficit``; we average the two marginal totals. Since ``excess + deficit``
    is exactly ``|mu - nu|`` elementwise, this coincides with tv_distance to the
    last bit.
    """
    mu, nu = _check_pair(mu, nu)
    diff = mu - nu
    excess = np.maximum(diff, 0.0)
    deficit = np.maximum(-diff, 0.0)
    return float(0.5 * np.sum(excess + deficit))


def empirical_from_states(states, cardinality: int) -> np.ndarray:
    s = np.asarray(states)
    if s.ndim != 1 or s.size == 0:
        raise UsageError("need a nonempty vector of states")
    if not np.issubdtype(s.dtype, np.integer):
        raise UsageError("states must be integer indices")
    if s.min() < 0 or s.max() >= cardinality:
        raise UsageError(f"state index out of range [0, {cardinality})")
    w = np.bincount(s, minlength=cardinality) / s.size
    w.flags.writeable = False
    return w


def lattice_points(n: int, m: int) -> np.ndarray:
    """All integer vectors of length n summing to m, in lexicographically
    decreasing order (so the first point is m at coordinate 0)."""
    pts = []
    # stars and bars: bar positions among m + n - 1 slots
    for bars in itertools.combinations(range(m + n - 1), n - 1):
        prev = -1
        row = []
        for b in bars:
            row.append(b - prev - 1)
            prev = b
        row.append(m + n - 2 - prev)
        pts.append(row)
    arr = np.array(pts, dtype=np.int64).reshape(-1, n)
    order = np.lexsort(arr.T[::-1])[::-1]
    return arr[order]


def covering_radius(n: int, m: int) -> float:
    """Largest tv distance from a point of P(X) to its nearest 1/m lattice point.

    Largest-remainder rounding is tv-optimal; with k coordinates rounded up the
    worst case has all fractional parts equal to k/n, giving k(n-k)/(n m).
    """
    if n == 1:
        return 0.0
    k = n // 2
    return k * (n - k) / (n * m)


@dataclass(frozen=True)
class SimplexGrid:
    """Voronoi (tv-nearest, lowest index wins) cells around the 1/m lattice."""

    n: int
    resolution: int
    representatives: np.ndarray
    diameter: float

    @property
    def size(self) -> int:
        return self.representatives.shape[0]

    @property
    def covering_radius(self) -> float:
        return covering_radius(self.n, self.resolution)

    def project(self, mu) -> int:
        return project_to_grid(mu, self)

    def project_many(self, mus) -> tuple[np.ndarray, np.ndarray]:
        """Bin indices and tv distances for a batch of measures."""
        mus = np.asarray(mus, dtype=np.float64)
        if mus.ndim != 2 or mus.shape[1] != self.n:
            raise UsageError("expected an array of shape (k, |X|)")
        return kernels.nearest_rep(mus, self.representatives)

    def to_json(self) -> dict:
        return {
            "cardinality": self.n,
            "resolution": self.resolution,
            "diameter": self.diameter,
            "representatives": self.representatives.tolist(),
        }

    @classmethod
    def from_json(cls, data: dict) -> "SimplexGrid":
        g = build_grid(int(data["cardinality"]), int(data["resolution"]))
        if "representatives" in data and not np.allclose(
            np.asarray(data["representatives"]), g.representatives, atol=1e-12
        ):
            raise UsageError("serialized representatives do not match the lattice")
        return g


def build_grid(cardinality: int, resolution: int) -> SimplexGrid:
    if cardinality < 1:
        raise UsageError("cardinality must be positive")
    if resolution < 1:
        raise UsageError("grid resolution must be a positive integer")
    reps = lattice_points(cardinality, resolution) / resolution
    assert reps.shape[0] == comb(resolution + cardinality - 1, cardinality - 1)
    reps.flags.writeable = False
    # Every cell sits inside the tv ball of the covering radius around its
    # representative, so twice that radius bounds the cell diameter. For
    # |X| = 2 the cells are intervals and the bound is attained.
    diam = 2.0 * covering_radius(cardinality, resolution)
    return SimplexGrid(cardinality, resolution, reps, diam)


def project_to_grid(mu, grid: SimplexGrid) -> int:
    mu = np.asarray(mu, dtype=np.float64)
    if mu.shape != (grid.n,):
        raise UsageError(f"dimension mismatch {mu.shape} vs ({grid.n},)")
    idx, _ = kernels.nearest_rep(mu[None, :], grid.representatives)
    return int(idx[0])


def measure_to_json(mu) -> str:
    return json.dumps([float(v) for v in np.asarray(mu)])


def measure_from_json(text: str) -> np.ndarray:
    return as_measure(json.loads(text))
