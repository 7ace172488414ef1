"""Regular self-mappings of R^n and the inequalities that certify them.

Every operator maps rows of a 2-D array through ``_map`` so that whole
ensembles of points can be pushed through in one call; ``op(x)`` handles a
single point.  Operators are immutable after construction.

Regularity tags follow the usual hierarchy: an operator tagged
``Averaged(alpha)`` satisfies

    ||Tx - Ty||^2 <= ||x - y||^2 - (1 - alpha)/alpha * psi(x, y, Tx, Ty)

where ``psi`` is the transport discrepancy ``||(Tx - x) - (Ty - y)||^2``,
and is in particular nonexpansive.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

__all__ = [
    "DimensionError",
    "NonFiniteError",
    "RegularityKind",
    "Regularity",
    "Operator",
    "Identity",
    "LinearMap",
    "Hyperplane",
    "Halfspace",
    "Ball",
    "AffineSubspace",
    "ProxQuadratic",
    "ProxL1",
    "ProxIndicator",
    "GradStep",
    "Reflector",
    "Relaxation",
    "Composition",
    "ForwardBackward",
    "DouglasRachford",
    "apply",
    "reflect",
    "forward_backward_step",
    "douglas_rachford_step",
    "relax",
    "compose",
    "averaged_composition_constant",
    "transport_discrepancy",
    "AveragedCheck",
    "check_averaged_inequality",
    "check_nonexpansive",
    "averaged_slack",
    "RTOL",
    "ATOL",
]

# Tolerances for inequalities built from differences of squared norms.
RTOL = 1e-9
ATOL = 1e-12


class DimensionError(ValueError):
    """Point and operator live in different ambient dimensions."""


class NonFiniteError(ValueError):
    """Input contains NaN or Inf."""


class RegularityKind(enum.Enum):
    NONEXPANSIVE = "nonexpansive"
    AVERAGED = "averaged"
    CONTRACTION_IN_EXPECTATION = "contraction_in_expectation"


@dataclass(frozen=True)
class Regularity:
    kind: RegularityKind
    constant: float | None = None

    @classmethod
    def nonexpansive(cls) -> "Regularity":
        return cls(RegularityKind.NONEXPANSIVE)

    @classmethod
    def averaged(cls, alpha: float) -> "Regularity":
        if not 0.0 < alpha < 1.0:
            raise ValueError(f"averaging constant must lie in (0, 1), got {alpha}")
        return cls(RegularityKind.AVERAGED, float(alpha))

    @classmethod
    def contraction(cls, r: float) -> "Regularity":
        if not 0.0 <= r < 1.0:
            raise ValueError(f"contraction constant must lie in [0, 1), got {r}")
        return cls(RegularityKind.CONTRACTION_IN_EXPECTATION, float(r))

    @property
    def is_averaged(self) -> bool:
        return self.kind is RegularityKind.AVERAGED

    @property
    def is_nonexpansive(self) -> bool:
        # averaged implies nonexpansive in a Hilbert space
        return self.kind in (RegularityKind.NONEXPANSIVE, RegularityKind.AVERAGED)

    def __str__(self) -> str:
        if self.constant is None:
            return self.kind.value
        return f"{self.kind.value}({self.constant:g})"


def _as_vector(x, name: str = "x") -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1)
    if x.ndim != 1:
        raise DimensionError(f"{name} must be a vector, got shape {x.shape}")
    return x


class Operator:
    """Base class for single-valued self-mappings of R^n.

    Subclasses set ``dim`` and ``regularity`` and implement ``_map`` on a
    2-D array whose rows are points.
    """

    dim: int
    regularity: Regularity | None = None
    # prox maps and projectors carry this so that reflect() can check its input
    is_prox: bool = False
    # prox step size; None means the map does not depend on a step
    step: float | None = None

    def _map(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def map_rows(self, X) -> np.ndarray:
        """Apply the operator to every row of ``X``."""
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.dim:
            raise DimensionError(
                f"expected an array of shape (N, {self.dim}), got {X.shape}"
            )
        return self._map(X)

    def __call__(self, x) -> np.ndarray:
        x = _as_vector(x)
        if x.shape[0] != self.dim:
            raise DimensionError(f"point has dimension {x.shape[0]}, operator {self.dim}")
        return self._map(x[None, :])[0]

    def __repr__(self) -> str:
        return f"{type(self).__name__}(dim={self.dim}, regularity={self.regularity})"


class Identity(Operator):
    """The identity map; also the projector onto the whole space and prox of 0."""

    is_prox = True

    def __init__(self, dim: int):
        self.dim = int(dim)
        self.regularity = Regularity.averaged(0.5)

    def _map(self, X):
        return X.copy()


class LinearMap(Operator):
    """Affine map ``x -> M x + shift``.

    The tag defaults to nonexpansive when the spectral norm of ``M`` is at
    most one, and to no tag otherwise.  Pass ``regularity`` to override.
    """

    def __init__(self, matrix, shift=None, regularity: Regularity | None | str = "auto"):
        M = np.atleast_2d(np.asarray(matrix, dtype=float))
        if M.shape[0] != M.shape[1]:
            raise DimensionError(f"matrix must be square, got {M.shape}")
        self.matrix = M
        self.dim = M.shape[0]
        self.shift = np.zeros(self.dim) if shift is None else _as_vector(shift, "shift")
        if self.shift.shape[0] != self.dim:
            raise DimensionError("shift does not match the matrix dimension")
        if isinstance(regularity, str):
            norm = np.linalg.norm(M, 2) if self.dim else 0.0
            regularity = Regularity.nonexpansive() if norm <= 1.0 + 1e-12 else None
        self.regularity = regularity

    def _map(self, X):
        return X @ self.matrix.T + self.shift

    @classmethod
    def negation(cls, dim: int) -> "LinearMap":
        return cls(-np.eye(dim))

    @classmethod
    def scaling(cls, dim: int, factor: float) -> "LinearMap":
        return cls(factor * np.eye(dim))

    @classmethod
    def rotation(cls, angle: float) -> "LinearMap":
        c, s = math.cos(angle), math.sin(angle)
        return cls([[c, -s], [s, c]])

    @classmethod
    def translation(cls, shift) -> "LinearMap":
        shift = _as_vector(shift, "shift")
        return cls(np.eye(shift.shape[0]), shift, regularity=Regularity.nonexpansive())

    @classmethod
    def constant(cls, value) -> "LinearMap":
        value = _as_vector(value, "value")
        n = value.shape[0]
        return cls(np.zeros((n, n)), value, regularity=Regularity.nonexpansive())


class Hyperplane(Operator):
    """Orthogonal projector onto ``{x : <a, x> = b}``."""

    is_prox = True

    def __init__(self, a, b: float):
        a = _as_vector(a, "a")
        nrm2 = float(a @ a)
        if not nrm2 > 0.0 or not np.isfinite(nrm2):
            raise ValueError("hyperplane normal must be finite and nonzero")
        self.a, self.b, self._nrm2 = a, float(b), nrm2
        self.dim = a.shape[0]
        self.regularity = Regularity.averaged(0.5)

    def _map(self, X):
        coef = (X @ self.a - self.b) / self._nrm2
        return X - coef[:, None] * self.a


class Halfspace(Operator):
    """Orthogonal projector onto ``{x : <a, x> <= b}``."""

    is_prox = True

    def __init__(self, a, b: float):
        a = _as_vector(a, "a")
        nrm2 = float(a @ a)
        if not nrm2 > 0.0 or not np.isfinite(nrm2):
            raise ValueError("halfspace normal must be finite and nonzero")
        self.a, self.b, self._nrm2 = a, float(b), nrm2
        self.dim = a.shape[0]
        self.regularity = Regularity.averaged(0.5)

    def _map(self, X):
        coef = np.maximum(X @ self.a - self.b, 0.0) / self._nrm2
        return X - coef[:, None] * self.a


class Ball(Operator):
    """Projector onto the closed ball with given center and radius."""

    is_prox = True

    def __init__(self, center, radius: float):
        self.center = _as_vector(center, "center")
        if not radius >= 0.0:
            raise ValueError("radius must be nonnegative")
        self.radius = float(radius)
        self.dim = self.center.shape[0]
        self.regularity = Regularity.averaged(0.5)

    def _map(self, X):
        D = X - self.center
        r = np.linalg.norm(D, axis=1)
        scale = np.ones_like(r)
        outside = r > self.radius
        scale[outside] = self.radius / r[outside]
        return self.center + D * scale[:, None]


class AffineSubspace(Operator):
    """Projector onto ``anchor + span(basis columns)``."""

    is_prox = True

    def __init__(self, basis, anchor):
        B = np.asarray(basis, dtype=float)
        if B.ndim == 1:
            B = B[:, None]
        self.anchor = _as_vector(anchor, "anchor")
        self.dim = self.anchor.shape[0]
        if B.shape[0] != self.dim:
            raise DimensionError("basis rows must match the anchor dimension")
        if B.shape[1]:
            q, r = np.linalg.qr(B)
            rank = int(np.sum(np.abs(np.diag(r)) > 1e-12 * max(1.0, np.abs(r).max())))
            self._q = q[:, :rank]
        else:
            self._q = np.zeros((self.dim, 0))
        self.regularity = Regularity.averaged(0.5)

    def _map(self, X):
        D = X - self.anchor
        return self.anchor + (D @ self._q) @ self._q.T


class ProxQuadratic(Operator):
    """prox of ``t * (0.5 x'Qx + c'x)`` with ``Q`` symmetric positive definite."""

    is_prox = True

    def __init__(self, Q, c=None, t: float = 1.0):
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        if not t > 0:
            raise ValueError("prox step must be positive")
        self.dim = Q.shape[0]
        self.Q = Q
        self.c = np.zeros(self.dim) if c is None else _as_vector(c, "c")
        self.step = float(t)
        # raises LinAlgError when Q is not positive definite
        self._chol = cho_factor(np.eye(self.dim) + t * Q)
        self.regularity = Regularity.averaged(0.5)

    def _map(self, X):
        rhs = X - self.step * self.c
        return cho_solve(self._chol, rhs.T).T


class ProxL1(Operator):
    """Soft thresholding, the prox of ``t * ||x||_1``."""

    is_prox = True

    def __init__(self, dim: int, t: float):
        if not t > 0:
            raise ValueError("prox step must be positive")
        self.dim = int(dim)
        self.step = float(t)
        self.regularity = Regularity.averaged(0.5)

    def _map(self, X):
        return np.sign(X) * np.maximum(np.abs(X) - self.step, 0.0)


class ProxIndicator(Operator):
    """prox of the indicator of a projectable set, i.e. its projector.

    The step size is irrelevant for indicators, so any ``t`` is accepted
    when combined with a gradient step.
    """

    is_prox = True

    def __init__(self, projector: Operator):
        if not projector.is_prox or projector.step is not None:
            raise TypeError("ProxIndicator wraps a set projector")
        self.projector = projector
        self.dim = projector.dim
        self.regularity = Regularity.averaged(0.5)

    def _map(self, X):
        return self.projector._map(X)


class GradStep(Operator):
    """Gradient step ``x - t * grad(x)`` for an L-smooth convex function.

    ``grad`` receives a 2-D array of points (one per row) when
    ``vectorized`` is true, otherwise a single point.

    For ``t < 2/L`` the step is averaged with constant ``tL/2``; at
    ``t = 2/L`` only nonexpansiveness survives, and beyond that no tag is
    kept.
    """

    def __init__(self, grad: Callable, t: float, L: float, dim: int, vectorized: bool = True):
        if not t > 0:
            raise ValueError("step must be positive")
        if not L > 0:
            raise ValueError("Lipschitz constant must be positive")
        self.grad, self.step, self.L = grad, float(t), float(L)
        self.dim = int(dim)
        self.vectorized = vectorized
        tl = self.step * self.L
        if tl < 2.0:
            self.regularity = Regularity.averaged(tl / 2.0)
        elif tl == 2.0:
            self.regularity = Regularity.nonexpansive()
        else:
            self.regularity = None

    def _map(self, X):
        if self.vectorized:
            G = np.asarray(self.grad(X), dtype=float).reshape(X.shape)
        else:
            G = np.array([self.grad(x) for x in X], dtype=float).reshape(X.shape)
        return X - self.step * G

    @classmethod
    def quadratic(cls, Q, c=None, t: float = 1.0) -> "GradStep":
        """Gradient step for ``0.5 x'Qx + c'x`` with ``L = lambda_max(Q)``."""
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        c = np.zeros(Q.shape[0]) if c is None else _as_vector(c, "c")
        L = float(np.linalg.eigvalsh((Q + Q.T) / 2.0).max())
        return cls(lambda X: X @ Q.T + c, t, L if L > 0 else 1.0, Q.shape[0])


class Reflector(Operator):
    """``2 prox - Id``."""

    def __init__(self, inner: Operator):
        if not inner.is_prox:
            raise TypeError("reflector needs a prox map or projector")
        self.inner = inner
        self.dim = inner.dim
        self.regularity = Regularity.nonexpansive()

    def _map(self, X):
        return 2.0 * self.inner._map(X) - X


class Relaxation(Operator):
    """``(1 - lam) Id + lam T``."""

    def __init__(self, inner: Operator, lam: float):
        if not 0.0 < lam <= 1.0:
            raise ValueError(f"relaxation parameter must lie in (0, 1], got {lam}")
        self.inner, self.lam = inner, float(lam)
        self.dim = inner.dim
        reg = inner.regularity
        if reg is not None and reg.is_averaged:
            self.regularity = Regularity.averaged(self.lam * reg.constant)
        elif reg is not None and reg.is_nonexpansive and self.lam < 1.0:
            self.regularity = Regularity.averaged(self.lam)
        else:
            self.regularity = reg

    def _map(self, X):
        return (1.0 - self.lam) * X + self.lam * self.inner._map(X)


def averaged_composition_constant(a1: float, a2: float) -> float:
    """Averaging constant of the composition of two averaged maps."""
    return 2.0 / (1.0 + 1.0 / max(a1, a2))


def _fold_regularity(regs: Sequence[Regularity | None]) -> Regularity | None:
    if any(r is None or not r.is_nonexpansive for r in regs):
        return None
    if all(r.is_averaged for r in regs):
        alpha = regs[0].constant
        for r in regs[1:]:
            alpha = averaged_composition_constant(alpha, r.constant)
        return Regularity.averaged(alpha)
    return Regularity.nonexpansive()


class Composition(Operator):
    """``ops[0] o ops[1] o ... o ops[-1]``; the last operator acts first."""

    def __init__(self, ops: Sequence[Operator]):
        ops = list(ops)
        if not ops:
            raise ValueError("cannot compose an empty list of operators")
        dims = {op.dim for op in ops}
        if len(dims) != 1:
            raise DimensionError(f"operators have mixed dimensions {sorted(dims)}")
        self.ops = tuple(ops)
        self.dim = ops[0].dim
        self.regularity = _fold_regularity([op.regularity for op in ops])

    def _map(self, X):
        for op in reversed(self.ops):
            X = op._map(X)
        return X


class ForwardBackward(Operator):
    """``prox_{tg}(x - t grad f(x))``."""

    def __init__(self, prox: Operator, grad_step: GradStep):
        if not prox.is_prox:
            raise TypeError("first argument must be a prox map")
        if not isinstance(grad_step, GradStep):
            raise TypeError("second argument must be a GradStep")
        if prox.dim != grad_step.dim:
            raise DimensionError("prox and gradient parts have different dimensions")
        if prox.step is not None and not math.isclose(prox.step, grad_step.step, rel_tol=1e-12):
            raise ValueError(
                f"prox step {prox.step} differs from gradient step {grad_step.step}"
            )
        self.prox, self.grad_step = prox, grad_step
        self.dim = prox.dim
        self.step = grad_step.step
        tl = grad_step.step * grad_step.L
        if tl < 2.0:
            self.regularity = Regularity.averaged(2.0 / (1.0 + 2.0 / max(tl, 1.0)))
        elif tl == 2.0:
            self.regularity = Regularity.nonexpansive()
        else:
            warnings.warn(
                f"step t={grad_step.step} exceeds 2/L={2.0 / grad_step.L}; "
                "forward-backward map is no longer averaged",
                stacklevel=2,
            )
            self.regularity = None

    def _map(self, X):
        return self.prox._map(self.grad_step._map(X))


class DouglasRachford(Operator):
    """``(R_f R_g + Id) / 2`` with ``R = 2 prox - Id``."""

    def __init__(self, prox_f: Operator, prox_g: Operator):
        if prox_f.dim != prox_g.dim:
            raise DimensionError("prox maps have different dimensions")
        self.refl_f, self.refl_g = Reflector(prox_f), Reflector(prox_g)
        self.dim = prox_f.dim
        self.regularity = Regularity.averaged(0.5)

    def _map(self, X):
        return 0.5 * (self.refl_f._map(self.refl_g._map(X)) + X)


def apply(op: Operator, x) -> np.ndarray:
    """Evaluate ``op`` at ``x`` after checking dimension and finiteness."""
    x = _as_vector(x)
    if x.shape[0] != op.dim:
        raise DimensionError(f"point has dimension {x.shape[0]}, operator {op.dim}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("input point has non-finite entries")
    return op(x)


def reflect(prox_op: Operator, x) -> np.ndarray:
    return apply(Reflector(prox_op), x)


def forward_backward_step(prox_g: Operator, grad_f: GradStep, x) -> np.ndarray:
    return apply(ForwardBackward(prox_g, grad_f), x)


def douglas_rachford_step(prox_f: Operator, prox_g: Operator, x) -> np.ndarray:
    return apply(DouglasRachford(prox_f, prox_g), x)


def relax(op: Operator, lam: float) -> Operator:
    """Relaxation ``(1 - lam) Id + lam op``; ``lam = 1`` returns ``op``."""
    if not 0.0 < lam <= 1.0:
        raise ValueError(f"relaxation parameter must lie in (0, 1], got {lam}")
    if lam == 1.0:
        return op
    return Relaxation(op, lam)


def compose(ops: Sequence[Operator]) -> Operator:
    """Compose right-to-left.  A single operator is returned unchanged.

    Averaging constants of averaged factors are folded pairwise from the
    left with ``2 / (1 + 1/max(a1, a2))``.
    """
    ops = list(ops)
    if len(ops) == 1:
        return ops[0]
    return Composition(ops)


def transport_discrepancy(x, y, fx, fy) -> float:
    """``||(fx - x) - (fy - y)||^2``."""
    x, y, fx, fy = (_as_vector(v) for v in (x, y, fx, fy))
    if not x.shape == y.shape == fx.shape == fy.shape:
        raise DimensionError("all four points must have the same dimension")
    d = (fx - x) - (fy - y)
    return float(d @ d)


class AveragedCheck(NamedTuple):
    holds: bool
    slack: float


def averaged_slack(op: Operator, alpha: float, X, Y) -> tuple[np.ndarray, np.ndarray]:
    """Slack of the averaged inequality on row-paired points.

    Returns ``(slack, tol)`` arrays; the inequality holds for a pair when
    ``slack >= -tol``.  ``alpha = 1`` gives the plain nonexpansive test.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if X.shape != Y.shape:
        raise DimensionError("paired point arrays differ in shape")
    TX, TY = op.map_rows(X), op.map_rows(Y)
    dist2 = np.sum((X - Y) ** 2, axis=1)
    img2 = np.sum((TX - TY) ** 2, axis=1)
    psi = np.sum(((TX - X) - (TY - Y)) ** 2, axis=1)
    penalty = (1.0 - alpha) / alpha * psi
    slack = dist2 - img2 - penalty
    tol = RTOL * np.maximum(np.maximum(dist2, img2), penalty) + ATOL
    return slack, tol


def check_averaged_inequality(op: Operator, alpha: float, x, y) -> AveragedCheck:
    """Test the averaged inequality for ``op`` with constant ``alpha`` at one pair."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    x, y = _as_vector(x), _as_vector(y)
    if x.shape != y.shape or x.shape[0] != op.dim:
        raise DimensionError("points must match the operator dimension")
    slack, tol = averaged_slack(op, alpha, x[None], y[None])
    return AveragedCheck(bool(slack[0] >= -tol[0]), float(slack[0]))


def check_nonexpansive(op: Operator, x, y) -> AveragedCheck:
    x, y = _as_vector(x), _as_vector(y)
    slack, tol = averaged_slack(op, 1.0, x[None], y[None])
    return AveragedCheck(bool(slack[0] >= -tol[0]), float(slack[0]))
