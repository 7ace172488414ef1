"""Finite discrete probability measures and distances between them.

Wasserstein distances are computed exactly: the quantile coupling on the
line, an assignment solver for equal-size uniform samples (after splitting
atoms to a common multiple when sample sizes differ), and a simplex
solver on the transportation LP for general weights.

The Prokhorov-Levy distance is evaluated exactly through its coupling
form: ``d_P(mu, nu)`` is the least ``eps`` for which some coupling puts
at most ``eps`` mass on pairs farther apart than ``eps``.  For finite
supports the minimal far-mass ``g(eps)`` is a step function that only
changes at pairwise distances, so the infimum is found by a binary search
over those distances, each probe being a 0/1-cost transport problem.
"""

from __future__ import annotations

import enum
import math
from bisect import bisect_right
from dataclasses import dataclass
from itertools import accumulate

import numpy as np
from scipy import sparse
from scipy.optimize import linear_sum_assignment, linprog
from scipy.spatial.distance import cdist

from .operators import DimensionError

__all__ = [
    "EmpiricalMeasure",
    "DistanceMethod",
    "DistanceReport",
    "BudgetExceeded",
    "wasserstein",
    "prokhorov",
    "moment",
    "tightness_profile",
    "MAX_EXACT_ATOMS",
    "MAX_PROKHOROV_ATOMS",
]

MAX_EXACT_ATOMS = 5000
MAX_PROKHOROV_ATOMS = 64
LCM_CAP = 4000
MAX_LP_CELLS = 250_000  # weighted LP cost grows quickly past ~500 x 500
WEIGHT_TOL = 1e-12


class BudgetExceeded(ValueError):
    """Exact transport problem larger than the solver budget."""


class EmpiricalMeasure:
    """Weighted atoms in R^n.

    Parameters
    ----------
    atoms : array_like, shape (m, n) or (m,)
        Support points; a 1-D array is read as m points on the line.
    weights : array_like, shape (m,), optional
        Nonnegative weights summing to one.  Uniform when omitted.
    """

    def __init__(self, atoms, weights=None):
        A = np.asarray(atoms, dtype=float)
        if A.ndim == 1:
            A = A[:, None]
        if A.ndim != 2 or A.shape[0] == 0:
            raise ValueError("a measure needs at least one atom")
        if not np.all(np.isfinite(A)):
            raise ValueError("atoms must be finite")
        if weights is None:
            w = np.full(A.shape[0], 1.0 / A.shape[0])
        else:
            w = np.asarray(weights, dtype=float).reshape(-1)
            if w.shape[0] != A.shape[0]:
                raise ValueError("one weight per atom is required")
            if np.any(w < 0) or not np.all(np.isfinite(w)):
                raise ValueError("weights must be finite and nonnegative")
            if abs(w.sum() - 1.0) > WEIGHT_TOL * max(1, A.shape[0]):
                raise ValueError(f"weights sum to {w.sum()!r}, not 1")
        self.atoms = A
        self.weights = w

    @classmethod
    def uniform(cls, points) -> "EmpiricalMeasure":
        return cls(points)

    @classmethod
    def _trusted(cls, atoms: np.ndarray, weights: np.ndarray | None = None) -> "EmpiricalMeasure":
        """Skip validation; for callers whose inputs are finite and normalized."""
        m = cls.__new__(cls)
        m.atoms = atoms
        m.weights = np.full(atoms.shape[0], 1.0 / atoms.shape[0]) if weights is None else weights
        return m

    @classmethod
    def dirac(cls, point) -> "EmpiricalMeasure":
        return cls(np.atleast_1d(np.asarray(point, dtype=float))[None, :])

    @classmethod
    def mixture(cls, measures, lambdas) -> "EmpiricalMeasure":
        lambdas = np.asarray(lambdas, dtype=float)
        if len(measures) != len(lambdas):
            raise ValueError("one mixture weight per measure is required")
        atoms = np.concatenate([m.atoms for m in measures])
        w = np.concatenate([lam * m.weights for m, lam in zip(measures, lambdas)])
        return cls(atoms, w)

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    @property
    def size(self) -> int:
        return self.atoms.shape[0]

    @property
    def is_uniform(self) -> bool:
        return bool(np.ptp(self.weights) <= WEIGHT_TOL)

    def mean(self) -> np.ndarray:
        return self.weights @ self.atoms

    def compress(self) -> "EmpiricalMeasure":
        """Merge identical atoms and drop zero weights."""
        keep = self.weights > 0
        uniq, inv = np.unique(self.atoms[keep], axis=0, return_inverse=True)
        w = np.bincount(inv.reshape(-1), weights=self.weights[keep], minlength=uniq.shape[0])
        return EmpiricalMeasure(uniq, w / w.sum())

    def __repr__(self) -> str:
        return f"EmpiricalMeasure(size={self.size}, dim={self.dim})"


class DistanceMethod(str, enum.Enum):
    ASSIGNMENT = "assignment"
    SORTED_1D = "sorted_1d"
    NETWORK_SIMPLEX = "network_simplex"
    PROKHOROV_GRID = "prokhorov_grid"
    PROKHOROV_BOUND = "prokhorov_bound"
    POINT_MASS = "point_mass"


@dataclass
class DistanceReport:
    value: float
    method: DistanceMethod
    coupling: np.ndarray | None = None
    p: float | None = None

    def to_dict(self) -> dict:
        out = {"value": self.value, "method": self.method.value}
        if self.p is not None:
            out["p"] = self.p
        return out


def _check_pair(mu: EmpiricalMeasure, nu: EmpiricalMeasure):
    if mu.dim != nu.dim:
        raise DimensionError(f"measures live in dimensions {mu.dim} and {nu.dim}")


# ------------------------------------------------------------------ transport

SMALL_MERGE = 32


def _quantile_merge(a, wa, b, wb):
    """Scalar port of ``_quantile_coupling`` on Python lists; cheaper for a few dozen atoms."""
    ia = sorted(range(len(a)), key=a.__getitem__)
    ib = sorted(range(len(b)), key=b.__getitem__)
    ca = list(accumulate(wa[i] for i in ia))
    cb = list(accumulate(wb[i] for i in ib))
    ca[-1] = cb[-1] = 1.0
    cuts = [0.0]
    for c in sorted(set(ca) | set(cb)):
        if c <= 1.0 and c - cuts[-1] > 1e-13:
            cuts.append(c)
    cuts[-1] = 1.0
    rows, cols, masses = [], [], []
    for lo, hi in zip(cuts, cuts[1:]):
        mass = hi - lo
        mid = lo + mass / 2.0
        rows.append(ia[min(bisect_right(ca, mid), len(ca) - 1)])
        cols.append(ib[min(bisect_right(cb, mid), len(cb) - 1)])
        masses.append(mass)
    return rows, cols, masses


def _quantile_coupling(a, wa, b, wb):
    """Monotone (north-west corner) coupling of two measures on the line.

    Returns index arrays and masses of the coupling's support.
    """
    ia, ib = np.argsort(a, kind="stable"), np.argsort(b, kind="stable")
    ca, cb = np.cumsum(wa[ia]), np.cumsum(wb[ib])
    ca[-1] = cb[-1] = 1.0
    cuts = np.union1d(ca, cb)
    cuts = np.concatenate(([0.0], cuts[cuts <= 1.0]))
    # equal partial sums rounded differently leave slivers; fold them away
    sliver = np.diff(cuts) <= 1e-13
    cuts = np.concatenate(([0.0], cuts[1:][~sliver]))
    if cuts[-1] != 1.0:
        cuts[-1] = 1.0
    mass = np.diff(cuts)
    mid = cuts[:-1] + mass / 2.0
    i = np.minimum(np.searchsorted(ca, mid, side="right"), len(ca) - 1)
    j = np.minimum(np.searchsorted(cb, mid, side="right"), len(cb) - 1)
    keep = mass > 0
    return ia[i[keep]], ib[j[keep]], mass[keep]


def _assignment(C: np.ndarray):
    rows, cols = linear_sum_assignment(C)
    return rows, cols


def _transport_lp(wa, wb, C):
    """Exact transportation problem via the HiGHS dual simplex.

    Returns ``(cost, coupling)``; the coupling is a vertex of the polytope.
    """
    n, m = C.shape
    if n * m > MAX_LP_CELLS:
        raise BudgetExceeded(
            f"{n} x {m} weighted transport problem exceeds the LP budget of {MAX_LP_CELLS} cells"
        )
    rows_a = sparse.kron(sparse.eye(n), np.ones((1, m)))
    rows_b = sparse.kron(np.ones((1, n)), sparse.eye(m))
    A_eq = sparse.vstack([rows_a, rows_b]).tocsr()
    b_eq = np.concatenate([wa, wb])
    res = linprog(C.ravel(), A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs-ds",
                  options={"primal_feasibility_tolerance": 1e-10,
                           "dual_feasibility_tolerance": 1e-10})
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    G = np.maximum(res.x.reshape(n, m), 0.0)
    return float(np.sum(G * C)), G


def _uniform_counts(mu: EmpiricalMeasure, nu: EmpiricalMeasure):
    """Split factors bringing two uniform measures to a common atom count."""
    if not (mu.is_uniform and nu.is_uniform):
        return None
    L = math.lcm(mu.size, nu.size)
    if L > LCM_CAP and mu.size != nu.size:
        return None
    return L // mu.size, L // nu.size


def _optimal_coupling(mu: EmpiricalMeasure, nu: EmpiricalMeasure, C: np.ndarray):
    """Optimal coupling for the cost matrix ``C`` between atoms of mu and nu."""
    split = _uniform_counts(mu, nu)
    if split is not None:
        ra, rb = split
        big = np.repeat(np.repeat(C, ra, axis=0), rb, axis=1)
        rows, cols = _assignment(big)
        L = big.shape[0]
        G = np.zeros_like(C)
        np.add.at(G, (rows // ra, cols // rb), 1.0 / L)
        return G, DistanceMethod.ASSIGNMENT
    _, G = _transport_lp(mu.weights, nu.weights, C)
    return G, DistanceMethod.NETWORK_SIMPLEX


def wasserstein(mu: EmpiricalMeasure, nu: EmpiricalMeasure, p: float = 2.0,
                method: str = "auto", coupling: bool = True) -> DistanceReport:
    """Exact Wasserstein-p distance between two discrete measures.

    Parameters
    ----------
    method : {"auto", "sorted", "assignment", "simplex"}
        ``auto`` uses the quantile coupling on the line, the assignment
        solver for uniform samples and the LP otherwise.
    coupling : bool
        Attach the optimal coupling matrix to the report.
    """
    _check_pair(mu, nu)
    if p < 1:
        raise ValueError("p must be at least 1")
    if method == "auto" and min(mu.size, nu.size) == 1:
        # the product is the only coupling with a point mass
        one, other = (mu, nu) if mu.size == 1 else (nu, mu)
        d = np.sqrt(np.sum((other.atoms - one.atoms[0]) ** 2, axis=1))
        cost = float(other.weights @ d ** p)
        G = None
        if coupling:
            G = (other.weights[None, :] if one is mu else other.weights[:, None]).copy()
        return DistanceReport(cost ** (1.0 / p), DistanceMethod.POINT_MASS, G, p)
    if method == "auto":
        if mu.dim == 1:
            method = "sorted"
        elif _uniform_counts(mu, nu) is not None:
            method = "assignment"
        else:
            method = "simplex"

    if method == "sorted":
        if mu.dim != 1:
            raise DimensionError("the sorted method needs measures on the line")
        if mu.size + nu.size <= SMALL_MERGE:
            a, b = mu.atoms[:, 0].tolist(), nu.atoms[:, 0].tolist()
            i, j, mass = _quantile_merge(a, mu.weights.tolist(), b, nu.weights.tolist())
            cost = math.fsum(m * abs(a[r] - b[c]) ** p for r, c, m in zip(i, j, mass))
        else:
            a, b = mu.atoms[:, 0], nu.atoms[:, 0]
            i, j, mass = _quantile_coupling(a, mu.weights, b, nu.weights)
            cost = float(np.sum(mass * np.abs(a[i] - b[j]) ** p))
        G = None
        if coupling and mu.size * nu.size <= 4_000_000:
            G = np.zeros((mu.size, nu.size))
            np.add.at(G, (np.asarray(i, dtype=np.intp), np.asarray(j, dtype=np.intp)), mass)
        return DistanceReport(cost ** (1.0 / p), DistanceMethod.SORTED_1D, G, p)

    if mu.size + nu.size > MAX_EXACT_ATOMS:
        raise BudgetExceeded(
            f"{mu.size + nu.size} atoms exceed the exact-transport budget of {MAX_EXACT_ATOMS}"
        )
    C = cdist(mu.atoms, nu.atoms) ** p
    if method == "assignment":
        if _uniform_counts(mu, nu) is None:
            raise ValueError("assignment needs uniform weights with a small common multiple")
        G, tag = _optimal_coupling(mu, nu, C)
    elif method == "simplex":
        _, G = _transport_lp(mu.weights, nu.weights, C)
        tag = DistanceMethod.NETWORK_SIMPLEX
    else:
        raise ValueError(f"unknown method {method!r}")
    cost = float(np.sum(G * C))
    return DistanceReport(max(cost, 0.0) ** (1.0 / p), tag, G if coupling else None, p)


# ------------------------------------------------------------------ Prokhorov

def _min_far_mass(mu: EmpiricalMeasure, nu: EmpiricalMeasure, D: np.ndarray, eps: float) -> float:
    """Least mass any coupling puts on pairs at distance > eps."""
    C = (D > eps).astype(float)
    if not C.any():
        return 0.0
    G, _ = _optimal_coupling(mu, nu, C)
    return float(min(1.0, max(0.0, np.sum(G * C))))


def prokhorov(mu: EmpiricalMeasure, nu: EmpiricalMeasure, mode: str = "auto",
              p: float = 2.0, max_atoms: int = MAX_PROKHOROV_ATOMS) -> DistanceReport:
    """Prokhorov-Levy distance.

    ``mode="exact"`` requires at most ``max_atoms`` distinct atoms in the
    combined support; ``"auto"`` falls back to the bound
    ``min(1, W_p^(p/(p+1)))`` for larger inputs.  That bound follows from
    Markov's inequality under an optimal coupling,
    ``P(|X - Y| > e) <= W_p^p / e^p``, taken at ``e^(p+1) = W_p^p``.
    """
    _check_pair(mu, nu)
    mu_c, nu_c = mu.compress(), nu.compress()
    support = np.unique(np.vstack([mu_c.atoms, nu_c.atoms]), axis=0).shape[0]
    if mode == "bound" or (mode == "auto" and support > max_atoms):
        w = wasserstein(mu, nu, p, coupling=False).value
        bound = min(1.0, w ** (p / (p + 1.0)))
        return DistanceReport(bound, DistanceMethod.PROKHOROV_BOUND, None, p)
    if mode not in ("auto", "exact"):
        raise ValueError(f"unknown mode {mode!r}")
    if support > max_atoms:
        raise BudgetExceeded(f"combined support {support} exceeds {max_atoms} atoms")

    D = cdist(mu_c.atoms, nu_c.atoms)
    # g is constant on [e_i, e_{i+1}); the answer sits in the first interval
    # where g(e_i) < e_{i+1}, at max(e_i, g(e_i)).
    e = np.unique(np.concatenate(([0.0], D.ravel())))
    upper = np.append(e[1:], np.inf)
    cache: dict[int, float] = {}

    def g(i):
        if i not in cache:
            cache[i] = _min_far_mass(mu_c, nu_c, D, e[i])
        return cache[i]

    lo, hi = 0, len(e) - 1  # g(e[-1]) = 0 < inf, so hi is always feasible
    while lo < hi:
        mid = (lo + hi) // 2
        if g(mid) < upper[mid]:
            hi = mid
        else:
            lo = mid + 1
    value = min(1.0, max(e[lo], g(lo)))
    return DistanceReport(float(value), DistanceMethod.PROKHOROV_GRID)


# ------------------------------------------------------------------ moments

def moment(mu: EmpiricalMeasure, p: float = 2.0, center=None) -> float:
    """``sum_i w_i ||atom_i - center||^p`` (center defaults to the origin)."""
    c = np.zeros(mu.dim) if center is None else np.atleast_1d(np.asarray(center, float))
    if c.shape[0] != mu.dim:
        raise DimensionError("center dimension does not match the measure")
    r = np.linalg.norm(mu.atoms - c, axis=1)
    return float(mu.weights @ r ** p)


def tightness_profile(mu: EmpiricalMeasure, center, radii) -> list[tuple[float, float]]:
    """Mass of the closed ball around ``center`` for each radius."""
    radii = [float(r) for r in radii]
    if any(b < a for a, b in zip(radii, radii[1:])):
        raise ValueError("radii must be sorted ascending")
    c = np.atleast_1d(np.asarray(center, float))
    r = np.linalg.norm(mu.atoms - c, axis=1)
    order = np.argsort(r)
    cum = np.cumsum(mu.weights[order])
    rs = r[order]
    out = []
    for rad in radii:
        n_in = np.searchsorted(rs, rad, side="right")
        out.append((rad, float(min(1.0, cum[n_in - 1])) if n_in else 0.0))
    return out
