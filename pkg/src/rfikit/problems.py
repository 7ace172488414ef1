"""Built-in stochastic fixed-point problems.

* noisy hyperplane projections ``H = {x : <a + xi, x - xbar> = zeta}``,
  single and swept cyclically (or row-randomly) over an affine system;
* stochastic gradient descent on a quadratic with additive linear noise;
* stochastic forward-backward and Douglas-Rachford over finite families.

Noise is produced from the engine's uniforms by inverse transforms, so
every draw is addressed by ``(seed, chain, iteration)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .engine import AUX, FiniteFamily, IndexSampler, OperatorFamily, _advance
from .operators import (DimensionError, DouglasRachford, ForwardBackward, Hyperplane, Operator,
                        Regularity)

__all__ = [
    "NoNoise",
    "ConstantNoise",
    "GaussianNoise",
    "UniformNoise",
    "BallNoise",
    "NoisyHyperplaneFamily",
    "AffineFeasibilityProblem",
    "CyclicSweepFamily",
    "RandomRowFamily",
    "NoisySgdProblem",
    "SgdFamily",
    "noisy_projection",
    "cyclic_sweep",
    "estimate_c",
    "second_moment_matrix",
    "estimate_d",
    "contraction_rate_estimate",
    "sgd_step",
    "stochastic_forward_backward",
    "stochastic_douglas_rachford",
]

# ------------------------------------------------------------------ noise


class NoiseSpec:
    """Maps a block of uniforms to noise vectors of a given dimension."""

    mean = 0.0

    def width(self, dim: int) -> int:
        raise NotImplementedError

    def transform(self, U: np.ndarray, dim: int) -> np.ndarray:
        raise NotImplementedError

    def sample(self, n: int, dim: int, seed: int) -> np.ndarray:
        """``n`` i.i.d. draws from an auxiliary stream of ``seed``."""
        U = IndexSampler(seed).uniforms(np.arange(n), 0, self.width(dim), AUX)
        return self.transform(U, dim)


@dataclass(frozen=True)
class NoNoise(NoiseSpec):
    def width(self, dim):
        return 0

    def transform(self, U, dim):
        return np.zeros((U.shape[0], dim))


@dataclass(frozen=True)
class ConstantNoise(NoiseSpec):
    value: float = 0.0

    @property
    def mean(self):
        return self.value

    def width(self, dim):
        return 0

    def transform(self, U, dim):
        return np.full((U.shape[0], dim), self.value)


@dataclass(frozen=True)
class GaussianNoise(NoiseSpec):
    """Isotropic centered Gaussian with per-component standard deviation."""

    scale: float = 1.0

    def width(self, dim):
        return dim

    def transform(self, U, dim):
        return self.scale * ndtri(U)


@dataclass(frozen=True)
class UniformNoise(NoiseSpec):
    """Componentwise uniform on ``[-half_width, half_width]``."""

    half_width: float = 1.0

    def width(self, dim):
        return dim

    def transform(self, U, dim):
        return self.half_width * (2.0 * U - 1.0)

    def variance(self, dim: int) -> float:
        """``E ||noise||^2``."""
        return dim * self.half_width ** 2 / 3.0


@dataclass(frozen=True)
class BallNoise(NoiseSpec):
    """Uniform in the centered ball of given radius."""

    radius: float = 1.0

    def width(self, dim):
        return dim + 1

    def transform(self, U, dim):
        G = ndtri(U[:, :dim])
        nrm = np.linalg.norm(G, axis=1, keepdims=True)
        nrm[nrm == 0] = 1.0
        r = self.radius * U[:, dim:dim + 1] ** (1.0 / dim)
        return G / nrm * r


# ------------------------------------------------------- noisy hyperplanes

def _check_noise(spec):
    if not isinstance(spec, NoiseSpec):
        raise TypeError(f"expected a noise specification, got {spec!r}")
    return spec


class NoisyHyperplaneFamily(OperatorFamily):
    """Exact projections onto ``{x : <a + xi, x - xbar> = zeta}``.

    ``xi`` perturbs the normal, ``zeta`` the offset; the two are drawn
    independently from disjoint blocks of the step's uniforms.
    """

    def __init__(self, a, xbar, xi: NoiseSpec = NoNoise(), zeta: NoiseSpec = NoNoise()):
        self.a = np.atleast_1d(np.asarray(a, dtype=float))
        self.xbar = np.atleast_1d(np.asarray(xbar, dtype=float))
        if self.a.shape != self.xbar.shape or self.a.ndim != 1:
            raise DimensionError("normal and anchor must be vectors of equal length")
        if not np.any(self.a != 0):
            raise ValueError("hyperplane normal must be nonzero")
        self.xi, self.zeta = _check_noise(xi), _check_noise(zeta)
        self.dim = self.a.shape[0]
        self._wxi = self.xi.width(self.dim)
        self.draw_width = self._wxi + self.zeta.width(1)
        self.regularity = Regularity.averaged(0.5)

    @property
    def b(self) -> float:
        return float(self.a @ self.xbar)

    def draws(self, U: np.ndarray):
        """Split uniforms into ``(xi, zeta)`` arrays of shapes (N, n), (N,)."""
        U = np.atleast_2d(U)
        xi = self.xi.transform(U[:, :self._wxi], self.dim)
        zeta = self.zeta.transform(U[:, self._wxi:], 1)[:, 0]
        return xi, zeta

    def project(self, X, xi, zeta):
        """Vectorized projection; returns (points, degenerate mask)."""
        N = self.a + xi
        nrm2 = np.sum(N * N, axis=1)
        bad = ~(nrm2 > 0.0)
        safe = np.where(bad, 1.0, nrm2)
        coef = (np.sum(N * (X - self.xbar), axis=1) - zeta) / safe
        out = X - coef[:, None] * N
        out[bad] = X[bad]
        return out, bad

    def step(self, X, U):
        xi, zeta = self.draws(U)
        return self.project(X, xi, zeta)

    def realize(self, u) -> Operator:
        xi, zeta = self.draws(np.atleast_2d(u))
        normal = self.a + xi[0]
        return Hyperplane(normal, normal @ self.xbar + zeta[0])


def noisy_projection(fam: NoisyHyperplaneFamily, x, draw) -> np.ndarray:
    """Project ``x`` onto the hyperplane sampled by ``draw = (xi, zeta)``."""
    xi, zeta = draw
    x = np.atleast_1d(np.asarray(x, dtype=float))
    xi = np.broadcast_to(np.asarray(xi, dtype=float), (fam.dim,))
    if x.shape != (fam.dim,):
        raise DimensionError("point dimension does not match the family")
    normal = fam.a + xi
    nrm2 = float(normal @ normal)
    if not nrm2 > 0:
        raise ValueError("sampled normal a + xi vanishes")
    return x - (normal @ (x - fam.xbar) - float(zeta)) / nrm2 * normal


class AffineFeasibilityProblem:
    """Rows ``<a_j, x> = b_j`` with anchors ``xbar_j`` on each row.

    Parameters
    ----------
    A, b : array_like
        System matrix (m, n) and right-hand side (m,).
    anchors : array_like, optional
        One point per row on its hyperplane.  By default a shared point is
        projected onto every row.
    xi, zeta : NoiseSpec
        Normal and offset noise, drawn independently per row.
    order : {"cyclic", "random"}
        A step sweeps all rows in order, or projects onto one uniformly
        chosen row.
    """

    def __init__(self, A, b, anchors=None, xi: NoiseSpec = NoNoise(),
                 zeta: NoiseSpec = NoNoise(), order: str = "cyclic", shared_point=None):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.b = np.atleast_1d(np.asarray(b, dtype=float))
        m, n = self.A.shape
        if self.b.shape != (m,):
            raise DimensionError("right-hand side length must equal the number of rows")
        if np.any(np.sum(self.A ** 2, axis=1) == 0):
            raise ValueError("every row needs a nonzero normal")
        if anchors is None:
            p = np.zeros(n) if shared_point is None else np.asarray(shared_point, float)
            self.shared_point = p
            coef = (self.A @ p - self.b) / np.sum(self.A ** 2, axis=1)
            anchors = p - coef[:, None] * self.A
        else:
            self.shared_point = None
        self.anchors = np.atleast_2d(np.asarray(anchors, dtype=float))
        if self.anchors.shape != (m, n):
            raise DimensionError("need one anchor of dimension n per row")
        resid = np.abs(np.sum(self.A * self.anchors, axis=1) - self.b)
        scale = np.maximum(1.0, np.abs(self.b))
        if np.any(resid > 1e-12 * scale * max(1.0, np.abs(self.anchors).max())):
            raise ValueError("anchors must satisfy their row equations")
        if order not in ("cyclic", "random"):
            raise ValueError("order must be 'cyclic' or 'random'")
        self.order = order
        self.rows = [NoisyHyperplaneFamily(self.A[j], self.anchors[j], xi, zeta)
                     for j in range(m)]

    @property
    def shape(self):
        return self.A.shape

    @classmethod
    def random(cls, m: int, n: int, seed: int, xi: NoiseSpec = NoNoise(),
               zeta: NoiseSpec = NoNoise(), order: str = "cyclic"):
        """Consistent Gaussian system ``A x = b`` with ``b = A x_true``."""
        rng = np.random.default_rng(seed)
        A = rng.standard_normal((m, n))
        x_true = rng.standard_normal(n)
        shared = rng.standard_normal(n)
        prob = cls(A, A @ x_true, xi=xi, zeta=zeta, order=order, shared_point=shared)
        prob.x_true = x_true
        return prob

    def row_space_point(self, scale: float, seed: int) -> np.ndarray:
        """Shared anchor point pushed off along a random row-space direction.

        Cyclic projections from here converge to the projection of the
        shared point onto the solution set, which stays close to the
        anchors, so the noise floor is set by the noise level alone.
        """
        g = np.random.default_rng(seed).standard_normal(self.A.shape[0])
        return self.shared_point + scale * (self.A.T @ g)

    def family(self) -> OperatorFamily:
        return CyclicSweepFamily(self) if self.order == "cyclic" else RandomRowFamily(self)


def cyclic_sweep(prob: AffineFeasibilityProblem, x, draws) -> np.ndarray:
    """Apply ``P^m o ... o P^1`` with the given per-row ``(xi_j, zeta_j)``."""
    draws = list(draws)
    if len(draws) != len(prob.rows):
        raise ValueError("one (xi, zeta) draw per row is required")
    for fam, d in zip(prob.rows, draws):
        x = noisy_projection(fam, x, d)
    return x


class CyclicSweepFamily(OperatorFamily):
    def __init__(self, prob: AffineFeasibilityProblem):
        self.prob = prob
        self.dim = prob.A.shape[1]
        self._w = prob.rows[0].draw_width
        self.draw_width = self._w * len(prob.rows)
        self.regularity = Regularity.nonexpansive()

    def step(self, X, U):
        bad = np.zeros(X.shape[0], dtype=bool)
        for j, fam in enumerate(self.prob.rows):
            X, b = fam.step(X, U[:, j * self._w:(j + 1) * self._w])
            bad |= b
        return X, bad


class RandomRowFamily(OperatorFamily):
    def __init__(self, prob: AffineFeasibilityProblem):
        self.prob = prob
        self.dim = prob.A.shape[1]
        self.draw_width = 1 + prob.rows[0].draw_width
        self.regularity = Regularity.averaged(0.5)

    def step(self, X, U):
        m = len(self.prob.rows)
        idx = np.minimum((U[:, 0] * m).astype(int), m - 1)
        out = np.empty_like(X)
        bad = np.zeros(X.shape[0], dtype=bool)
        for j in np.unique(idx):
            sel = idx == j
            out[sel], bad[sel] = self.prob.rows[j].step(X[sel], U[sel, 1:])
        return out, bad


# ------------------------------------------------------- noise constants

def _sphere_points(dim: int, count: int, seed: int) -> np.ndarray:
    if dim == 1:
        return np.array([[1.0], [-1.0]])
    if dim == 2:
        # equispaced half circle suffices: the integrand is even in z
        theta = np.pi * (np.arange(count) + 0.5) / count
        return np.column_stack([np.cos(theta), np.sin(theta)])
    G = GaussianNoise(1.0).sample(count, dim, seed)
    return G / np.linalg.norm(G, axis=1, keepdims=True)


def _unit_normals(fam: NoisyHyperplaneFamily, noise_samples: int, seed: int) -> np.ndarray:
    xi = fam.xi.sample(noise_samples, fam.dim, seed)
    N = fam.a + xi
    nrm = np.linalg.norm(N, axis=1)
    N = N[nrm > 0] / nrm[nrm > 0, None]
    return N


def estimate_c(fam: NoisyHyperplaneFamily, sphere_samples: int, noise_samples: int,
               seed: int) -> float:
    """Minimum over sampled unit directions ``z`` of ``E <u, z>^2``.

    ``u = (a + xi)/||a + xi||``.  In 2-D the directions are an equispaced
    grid of ``sphere_samples`` angles, otherwise random; either way the
    result overestimates the infimum by at most the grid resolution.
    """
    if sphere_samples < 1:
        raise ValueError("sphere_samples must be at least 1")
    Z = _sphere_points(fam.dim, sphere_samples, seed + 1)
    Un = _unit_normals(fam, noise_samples, seed)
    vals = np.zeros(Z.shape[0])
    for lo in range(0, Un.shape[0], 20000):
        vals += np.sum((Un[lo:lo + 20000] @ Z.T) ** 2, axis=0)
    return float(vals.min() / Un.shape[0])


def second_moment_matrix(fam: NoisyHyperplaneFamily, noise_samples: int, seed: int) -> np.ndarray:
    """Monte Carlo ``E[u u^T]`` for the unit random normal ``u``.

    Its smallest eigenvalue is the infimum defining ``c``.
    """
    Un = _unit_normals(fam, noise_samples, seed)
    return Un.T @ Un / Un.shape[0]


def estimate_d(fam: NoisyHyperplaneFamily, noise_samples: int, seed: int) -> float:
    """Monte Carlo mean of ``(b + zeta)^2 / ||a + xi||^2`` with ``b = <a, xbar>``."""
    if noise_samples < 1:
        raise ValueError("noise_samples must be at least 1")
    xi = fam.xi.sample(noise_samples, fam.dim, seed)
    zeta = fam.zeta.sample(noise_samples, 1, seed + 1)[:, 0]
    nrm2 = np.sum((fam.a + xi) ** 2, axis=1)
    ok = nrm2 > 0
    return float(np.mean((fam.b + zeta[ok]) ** 2 / nrm2[ok]))


def contraction_rate_estimate(family: OperatorFamily, sampler: IndexSampler, pair_samples: int,
                              noise_samples: int, seed: int = 0, scale: float = 1.0) -> float:
    """Largest observed ``sqrt(E||T x - T y||^2 / ||x - y||^2)`` over random pairs.

    Both points of a pair see the same draws.  Being a maximum over
    finitely many pairs, the value underestimates the true constant.
    """
    if pair_samples < 1:
        raise ValueError("pair_samples must be at least 1")
    pts = GaussianNoise(scale).sample(2 * pair_samples, family.dim, seed)
    ids = np.arange(noise_samples, dtype=np.int64)
    best = 0.0
    for i in range(pair_samples):
        x, y = pts[2 * i], pts[2 * i + 1]
        d2 = float(np.sum((x - y) ** 2))
        if d2 == 0.0:
            continue
        X = np.repeat(x[None], noise_samples, axis=0)
        Y = np.repeat(y[None], noise_samples, axis=0)
        # same (chain, iteration) address gives the same draw for x and y
        TX = _advance(family, sampler, X, ids, 0)
        TY = _advance(family, sampler, Y, ids, 0)
        ratio = np.mean(np.sum((TX - TY) ** 2, axis=1)) / d2
        best = max(best, ratio)
    return math.sqrt(best)


# ------------------------------------------------------------------ SGD

class NoisySgdProblem:
    """Quadratic ``f_eta(x) = 0.5 x'Qx + eta . x`` with random linear term.

    The admissible step range is ``(0, min{1/L, 1/tau, tau/L^2}]`` where
    ``L`` and ``tau`` are the extreme eigenvalues of ``Q``.  Steps outside
    that range are refused unless ``allow_outside_theory`` is set, in
    which case ``outside_theory`` is flagged.
    """

    def __init__(self, Q, eta: NoiseSpec, t: float, allow_outside_theory: bool = False):
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        if Q.shape[0] != Q.shape[1] or not np.allclose(Q, Q.T):
            raise ValueError("Q must be symmetric")
        ev = np.linalg.eigvalsh(Q)
        if ev[0] <= 0:
            raise ValueError("Q must be positive definite")
        self.Q, self.eta = Q, _check_noise(eta)
        self.L, self.tau = float(ev[-1]), float(ev[0])
        self.dim = Q.shape[0]
        self.t = float(t)
        self.outside_theory = not 0 < self.t <= self.max_step
        if self.outside_theory and not allow_outside_theory:
            raise ValueError(f"step {t} outside (0, {self.max_step}]")

    @property
    def max_step(self) -> float:
        return min(1.0 / self.L, 1.0 / self.tau, self.tau / self.L ** 2)

    @property
    def minimizer(self) -> np.ndarray:
        mean = np.full(self.dim, float(self.eta.mean))
        return np.linalg.solve(self.Q, -mean) + 0.0  # no negative zeros

    @property
    def pbar(self) -> float:
        """``E f_eta`` at the minimizer of the expected objective."""
        xb = self.minimizer
        return float(0.5 * xb @ self.Q @ xb + np.full(self.dim, float(self.eta.mean)) @ xb)

    def family(self) -> "SgdFamily":
        return SgdFamily(self)


def sgd_step(prob: NoisySgdProblem, x, eta) -> np.ndarray:
    """``x - t (Q x + eta)``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return x - prob.t * (prob.Q @ x + np.asarray(eta, dtype=float))


class SgdFamily(OperatorFamily):
    def __init__(self, prob: NoisySgdProblem):
        self.prob = prob
        self.dim = prob.dim
        self.draw_width = prob.eta.width(prob.dim)
        tl = prob.t * prob.L
        self.regularity = Regularity.averaged(tl / 2.0) if tl < 2 else None

    def step(self, X, U):
        eta = self.prob.eta.transform(U, self.dim)
        return X - self.prob.t * (X @ self.prob.Q.T + eta), None


# ------------------------------------------------------- splitting families

def stochastic_forward_backward(prox_ops, grad_steps, prox_weights=None, grad_weights=None):
    """Family ``prox_{t g_i} o (Id - t grad f_j)`` with independent ``i``, ``j``."""
    pw = np.ones(len(prox_ops)) if prox_weights is None else np.asarray(prox_weights, float)
    gw = np.ones(len(grad_steps)) if grad_weights is None else np.asarray(grad_weights, float)
    ops, w = [], []
    for i, P in enumerate(prox_ops):
        for j, G in enumerate(grad_steps):
            ops.append(ForwardBackward(P, G))
            w.append(pw[i] / pw.sum() * gw[j] / gw.sum())
    return FiniteFamily(ops, w)


def stochastic_douglas_rachford(prox_f_ops, prox_g_ops, f_weights=None, g_weights=None):
    """Family ``(R_{f_i} R_{g_j} + Id)/2`` with independent ``i``, ``j``."""
    fw = np.ones(len(prox_f_ops)) if f_weights is None else np.asarray(f_weights, float)
    gw = np.ones(len(prox_g_ops)) if g_weights is None else np.asarray(g_weights, float)
    ops, w = [], []
    for i, F in enumerate(prox_f_ops):
        for j, G in enumerate(prox_g_ops):
            ops.append(DouglasRachford(F, G))
            w.append(fw[i] / fw.sum() * gw[j] / gw.sum())
    return FiniteFamily(ops, w)
