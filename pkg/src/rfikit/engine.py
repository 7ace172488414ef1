"""Random function iteration: ``X_{k+1} = T_{xi_k} X_k``.

Randomness comes from a counter-based stream.  A Philox generator keyed by
``(seed, purpose, attempt, iteration)`` is advanced to a block determined
by the chain id, so the draw seen by chain ``c`` at iteration ``k`` depends
on nothing else.  Ensembles are therefore reproducible, independent of
particle ordering, chunking and thread scheduling.
"""

from __future__ import annotations

import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .measures import EmpiricalMeasure
from .operators import DimensionError, NonFiniteError, Operator, Regularity

__all__ = [
    "IndexSampler",
    "FiniteDiscrete",
    "OperatorFamily",
    "FiniteFamily",
    "DegenerateDrawError",
    "ChainState",
    "TrajectoryLog",
    "EnsembleHistory",
    "PointMass",
    "GaussianLaw",
    "UniformBox",
    "EmpiricalLaw",
    "rfi_step",
    "run_chain",
    "run_ensemble",
    "cesaro_pool",
    "CesaroAccumulator",
    "markov_kernel_mc",
    "coupled_chains",
    "MAX_RESAMPLE",
]

MAX_RESAMPLE = 100

# stream purposes, mixed into the Philox key
STEP, INIT, KERNEL, AUX = 0, 1, 2, 3

_MASK64 = (1 << 64) - 1
_U53 = 2.0 ** -53


class DegenerateDrawError(RuntimeError):
    """Noise draws kept producing an ill-defined operator."""


@dataclass(frozen=True)
class IndexSampler:
    """Seeded source of i.i.d. uniforms addressed by (chain id, iteration).

    With ``coupled=True`` every chain receives the draws of chain 0, which
    couples trajectories started from different points.
    """

    seed: int
    coupled: bool = False

    def __post_init__(self):
        if not isinstance(self.seed, (int, np.integer)) or isinstance(self.seed, bool):
            raise TypeError("seed must be an integer")
        if not 0 <= int(self.seed) <= _MASK64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")

    def _key(self, k: int, purpose: int, attempt: int) -> list[int]:
        if not 0 <= k < (1 << 48):
            raise ValueError(f"iteration index out of range: {k}")
        return [int(self.seed), (purpose << 56) | (attempt << 48) | int(k)]

    def uniforms(self, chain_ids, k: int, width: int, purpose: int = STEP,
                 attempt: int = 0) -> np.ndarray:
        """Uniforms on the open interval (0, 1), one row of ``width`` per chain."""
        ids = np.atleast_1d(np.asarray(chain_ids, dtype=np.int64))
        out = np.empty((ids.shape[0], width))
        if width == 0 or ids.shape[0] == 0:
            return out
        if self.coupled:
            ids = np.zeros_like(ids)
        if np.any(ids < 0):
            raise ValueError("chain ids must be nonnegative")
        block = 4 * math.ceil(width / 4)  # Philox emits 4 words per counter step
        key = self._key(k, purpose, attempt)
        uniq, inverse = np.unique(ids, return_inverse=True)
        rows = np.empty((uniq.shape[0], width))
        # contiguous runs of ids share one generator
        breaks = np.flatnonzero(np.diff(uniq) != 1) + 1
        for run in np.split(np.arange(uniq.shape[0]), breaks):
            start = int(uniq[run[0]])
            bg = np.random.Philox(key=key)
            bg.advance(start * (block // 4))
            raw = bg.random_raw(run.shape[0] * block).reshape(run.shape[0], block)
            rows[run] = ((raw[:, :width] >> np.uint64(11)).astype(float) + 0.5) * _U53
        out[:] = rows[inverse]
        return out


@dataclass(frozen=True)
class FiniteDiscrete:
    """Distribution on ``{0, ..., m-1}`` given by (unnormalized) weights."""

    weights: tuple

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or w.size == 0 or np.any(w < 0) or not w.sum() > 0:
            raise ValueError("weights must be a nonempty nonnegative vector with positive sum")
        object.__setattr__(self, "weights", tuple(float(v) for v in w))

    @property
    def probabilities(self) -> np.ndarray:
        w = np.asarray(self.weights)
        return w / w.sum()

    def indices(self, u) -> np.ndarray:
        cum = np.cumsum(self.probabilities)
        cum[-1] = 1.0
        idx = np.searchsorted(cum, np.asarray(u), side="right")
        return np.minimum(idx, len(self.weights) - 1)


class OperatorFamily:
    """Indexed family ``{T_xi}`` driven by ``draw_width`` uniforms per step.

    ``step`` maps particle rows ``X`` with their uniforms ``U`` and returns
    the new rows together with a boolean mask of degenerate draws (or None).
    Rows flagged degenerate are redrawn by the engine.
    """

    dim: int
    draw_width: int
    regularity: Regularity | None = None

    def realize(self, u) -> Operator:
        raise NotImplementedError

    def step(self, X: np.ndarray, U: np.ndarray):
        out = np.empty_like(X)
        for i in range(X.shape[0]):
            out[i] = self.realize(U[i])._map(X[i:i + 1])[0]
        return out, None


class FiniteFamily(OperatorFamily):
    """Finitely many operators selected i.i.d. with the given weights."""

    def __init__(self, ops: Sequence[Operator], weights=None):
        ops = list(ops)
        if not ops:
            raise ValueError("operator family is empty")
        if len({op.dim for op in ops}) != 1:
            raise DimensionError("operators in a family must share their dimension")
        self.ops = tuple(ops)
        self.dim = ops[0].dim
        self.distribution = FiniteDiscrete(tuple(weights) if weights is not None
                                           else (1.0,) * len(ops))
        if len(self.distribution.weights) != len(ops):
            raise ValueError("one weight per operator is required")
        self.draw_width = 1 if len(ops) > 1 else 0
        self.regularity = _weakest([op.regularity for op in ops])

    def index(self, u) -> int:
        if self.draw_width == 0:
            return 0
        return int(self.distribution.indices(np.atleast_1d(u)[0]))

    def realize(self, u) -> Operator:
        return self.ops[self.index(u)]

    def step(self, X, U):
        if len(self.ops) == 1:
            return self.ops[0]._map(X), None
        idx = self.distribution.indices(U[:, 0])
        out = np.empty_like(X)
        for i in np.unique(idx):
            sel = idx == i
            out[sel] = self.ops[i]._map(X[sel])
        return out, None


def _weakest(regs):
    """Common tag valid for every member of a family."""
    if any(r is None or not r.is_nonexpansive for r in regs):
        return None
    if all(r.is_averaged for r in regs):
        return Regularity.averaged(max(r.constant for r in regs))
    return Regularity.nonexpansive()


def _advance(family: OperatorFamily, sampler: IndexSampler, X: np.ndarray,
             ids: np.ndarray, k: int, purpose: int = STEP) -> np.ndarray:
    U = sampler.uniforms(ids, k, family.draw_width, purpose)
    out, bad = family.step(X, U)
    attempt = 0
    while bad is not None and np.any(bad):
        attempt += 1
        if attempt > MAX_RESAMPLE:
            raise DegenerateDrawError(
                f"{int(np.sum(bad))} draws still degenerate after {MAX_RESAMPLE} resamples "
                f"at iteration {k}"
            )
        pos = np.flatnonzero(bad)
        U = sampler.uniforms(ids[pos], k, family.draw_width, purpose, attempt)
        redo, bad_redo = family.step(X[pos], U)
        out[pos] = redo
        bad = np.zeros(X.shape[0], dtype=bool)
        if bad_redo is not None:
            bad[pos[bad_redo]] = True
    if not np.isfinite(out).all():
        raise NonFiniteError(f"iterate became non-finite at iteration {k + 1}")
    return out


@dataclass(frozen=True)
class ChainState:
    x: np.ndarray
    k: int = 0
    chain_id: int = 0


def rfi_step(state: ChainState, sampler: IndexSampler, family: OperatorFamily) -> ChainState:
    """One step of the chain: apply the operator drawn for ``(chain_id, k)``."""
    x = np.asarray(state.x, dtype=float).reshape(1, -1)
    if x.shape[1] != family.dim:
        raise DimensionError(f"state has dimension {x.shape[1]}, family {family.dim}")
    ids = np.array([state.chain_id])
    new = _advance(family, sampler, x, ids, state.k)[0]
    return ChainState(new, state.k + 1, state.chain_id)


@dataclass
class TrajectoryLog:
    """Per-iteration records of a chain or an ensemble.

    ``residuals[k]`` is the (particle-averaged) step length
    ``||X_{k+1} - X_k||``; ``mean_norms[k]`` the ensemble mean of ``||X_k||``.
    ``points`` is kept only for single chains.
    """

    residuals: np.ndarray
    mean_norms: np.ndarray
    points: np.ndarray | None = None
    chain_id: int | None = None

    @property
    def iterations(self) -> int:
        return int(self.residuals.shape[0])


def run_chain(x0, K: int, sampler: IndexSampler, family: OperatorFamily,
              chain_id: int = 0) -> TrajectoryLog:
    """Run one chain for ``K`` steps and keep the whole trajectory."""
    if K < 1:
        raise ValueError("K must be at least 1")
    x = np.asarray(x0, dtype=float).reshape(1, -1)
    if x.shape[1] != family.dim:
        raise DimensionError(f"x0 has dimension {x.shape[1]}, family {family.dim}")
    pts = np.empty((K + 1, family.dim))
    pts[0] = x[0]
    ids = np.array([chain_id])
    for k in range(K):
        x = _advance(family, sampler, x, ids, k)
        pts[k + 1] = x[0]
    res = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    return TrajectoryLog(res, np.linalg.norm(pts, axis=1), pts, chain_id)


# ---------------------------------------------------------------- initial laws

@dataclass(frozen=True)
class PointMass:
    point: tuple

    def __init__(self, point):
        object.__setattr__(self, "point", tuple(np.atleast_1d(np.asarray(point, float))))

    @property
    def dim(self) -> int:
        return len(self.point)

    def sample(self, sampler: IndexSampler, chain_ids) -> np.ndarray:
        return np.tile(np.asarray(self.point), (len(chain_ids), 1))


@dataclass(frozen=True)
class GaussianLaw:
    mean: tuple
    std: float = 1.0

    def __init__(self, mean, std: float = 1.0):
        object.__setattr__(self, "mean", tuple(np.atleast_1d(np.asarray(mean, float))))
        object.__setattr__(self, "std", float(std))

    @property
    def dim(self) -> int:
        return len(self.mean)

    def sample(self, sampler, chain_ids):
        from scipy.special import ndtri

        U = sampler.uniforms(chain_ids, 0, self.dim, INIT)
        return np.asarray(self.mean) + self.std * ndtri(U)


@dataclass(frozen=True)
class UniformBox:
    low: tuple
    high: tuple

    def __init__(self, low, high):
        low = np.atleast_1d(np.asarray(low, float))
        high = np.atleast_1d(np.asarray(high, float))
        if low.shape != high.shape or np.any(high < low):
            raise ValueError("box bounds must have equal shape and low <= high")
        object.__setattr__(self, "low", tuple(low))
        object.__setattr__(self, "high", tuple(high))

    @property
    def dim(self) -> int:
        return len(self.low)

    def sample(self, sampler, chain_ids):
        U = sampler.uniforms(chain_ids, 0, self.dim, INIT)
        lo, hi = np.asarray(self.low), np.asarray(self.high)
        return lo + (hi - lo) * U


class EmpiricalLaw:
    """Draw initial points uniformly from a fixed point cloud."""

    def __init__(self, points):
        self.points = np.atleast_2d(np.asarray(points, dtype=float))

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def sample(self, sampler, chain_ids):
        U = sampler.uniforms(chain_ids, 0, 1, INIT)[:, 0]
        idx = np.minimum((U * len(self.points)).astype(int), len(self.points) - 1)
        return self.points[idx].copy()


# ------------------------------------------------------------------- ensembles

class EnsembleHistory(Sequence):
    """Snapshots ``mu_k`` (uniform empirical measures) at the retained ``ks``.

    Every ``thin``-th iteration is stored, and at most ``keep`` snapshots
    are held (oldest dropped first).  ``log`` covers every iteration.
    """

    def __init__(self, thin: int = 1, keep: int | None = None):
        self.thin = thin
        self._snaps: deque = deque(maxlen=keep)
        self.log: TrajectoryLog | None = None
        self.chain_ids: np.ndarray | None = None

    def _push(self, k: int, measure: EmpiricalMeasure):
        self._snaps.append((k, measure))

    @property
    def ks(self) -> list[int]:
        return [k for k, _ in self._snaps]

    def __len__(self) -> int:
        return len(self._snaps)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [m for _, m in list(self._snaps)[i]]
        return self._snaps[i][1]

    def __iter__(self) -> Iterator[EmpiricalMeasure]:
        return (m for _, m in self._snaps)

    def at(self, k: int) -> EmpiricalMeasure:
        for kk, m in self._snaps:
            if kk == k:
                return m
        raise KeyError(f"no snapshot retained for iteration {k}")

    @property
    def last_k(self) -> int:
        return self._snaps[-1][0]


def _map_chunks(fn, X, ids, threads: int):
    if threads <= 1 or X.shape[0] < 2 * threads:
        return fn(X, ids)
    parts = np.array_split(np.arange(X.shape[0]), threads)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        outs = list(pool.map(lambda p: fn(X[p], ids[p]), parts))
    return np.concatenate(outs, axis=0)


def _mean_norm(X: np.ndarray) -> float:
    return float(np.sqrt(np.einsum("ij,ij->i", X, X)).sum()) / X.shape[0]


def run_ensemble(init, N: int, K: int, sampler: IndexSampler, family: OperatorFamily,
                 thin: int = 1, keep: int | None = None, threads: int = 1,
                 chain_ids=None) -> EnsembleHistory:
    """Evolve ``N`` independent chains for ``K`` steps.

    ``init`` is an initial law (``PointMass``, ``GaussianLaw``, ...) or an
    explicit ``(N, n)`` array.  Snapshot ``k`` is the uniform empirical
    measure of the particles after ``k`` steps.
    """
    if N < 1:
        raise ValueError("N must be at least 1")
    if K < 0:
        raise ValueError("K must be nonnegative")
    if thin < 1:
        raise ValueError("thinning must be at least 1")
    ids = np.arange(N, dtype=np.int64) if chain_ids is None else \
        np.asarray(chain_ids, dtype=np.int64)
    if ids.shape != (N,):
        raise ValueError("need exactly one chain id per particle")
    if hasattr(init, "sample"):
        X = np.asarray(init.sample(sampler, ids), dtype=float)
    else:
        X = np.atleast_2d(np.asarray(init, dtype=float)).copy()
    if X.shape != (N, family.dim):
        raise DimensionError(f"initial ensemble has shape {X.shape}, expected {(N, family.dim)}")

    hist = EnsembleHistory(thin, keep)
    hist.chain_ids = ids
    res = np.empty(K)
    norms = np.empty(K + 1)
    norms[0] = _mean_norm(X)
    hist._push(0, EmpiricalMeasure.uniform(X))
    for k in range(K):
        Xn = _map_chunks(lambda Xc, ic: _advance(family, sampler, Xc, ic, k), X, ids, threads)
        res[k] = _mean_norm(Xn - X)
        X = Xn
        norms[k + 1] = _mean_norm(X)
        if (k + 1) % thin == 0:
            hist._push(k + 1, EmpiricalMeasure._trusted(X))
    hist.log = TrajectoryLog(res, norms)
    return hist


def _cesaro_weights(ks: Sequence[int], k: int) -> list[tuple[int, int]]:
    """Pairs (snapshot position, number of iterations it stands for) up to k."""
    if k < 1:
        raise ValueError("Cesaro index must be at least 1")
    if k not in ks:
        raise ValueError(f"no snapshot retained at iteration {k}")
    if not ks or ks[0] > 1:
        raise ValueError("history does not reach back to iteration 1")
    out = []
    prev = 0
    for pos, kk in enumerate(ks):
        if kk > k:
            break
        if kk >= 1:
            out.append((pos, kk - prev))
        prev = kk
    return out


def cesaro_pool(history, k: int) -> EmpiricalMeasure:
    """``nu_k = (1/k) sum_{j=1..k} mu_j`` as a pooled empirical measure.

    ``history`` is an ``EnsembleHistory`` or a plain list whose ``j``-th
    entry is ``mu_j``.  Thinned snapshots are weighted by the number of
    iterations they represent.
    """
    ks = history.ks if isinstance(history, EnsembleHistory) else list(range(len(history)))
    if k > (ks[-1] if ks else -1):
        raise ValueError(f"history holds iterations up to {ks[-1] if ks else None}, need {k}")
    parts = _cesaro_weights(ks, k)
    atoms, weights = [], []
    for pos, count in parts:
        m = history[pos]
        atoms.append(m.atoms)
        weights.append(m.weights * (count / k))
    return EmpiricalMeasure(np.concatenate(atoms), np.concatenate(weights))


class CesaroAccumulator:
    """Running Cesaro average with duplicate atoms merged.

    Cheap when the chain visits few distinct points, e.g. oscillating
    deterministic maps; ``measure()`` equals ``cesaro_pool`` up to atom
    merging.
    """

    def __init__(self):
        self._mass: dict[bytes, float] = {}
        self._atoms: dict[bytes, np.ndarray] = {}
        self.count = 0

    def add(self, measure: EmpiricalMeasure, count: int = 1):
        for atom, w in zip(measure.atoms, measure.weights):
            key = atom.tobytes()
            if key in self._mass:
                self._mass[key] += w * count
            else:
                self._mass[key] = w * count
                self._atoms[key] = atom
        self.count += count

    def measure(self) -> EmpiricalMeasure:
        if not self.count:
            raise ValueError("nothing accumulated")
        keys = list(self._mass)
        atoms = np.array([self._atoms[key] for key in keys])
        w = np.array([self._mass[key] for key in keys]) / self.count
        return EmpiricalMeasure._trusted(atoms, w / w.sum())


def markov_kernel_mc(x, N: int, sampler: IndexSampler, family: OperatorFamily) -> EmpiricalMeasure:
    """Empirical version of ``p(x, .)``: ``N`` independent draws of ``T_xi x``."""
    if N < 1:
        raise ValueError("N must be at least 1")
    x = np.asarray(x, dtype=float).reshape(1, -1)
    if x.shape[1] != family.dim:
        raise DimensionError("point dimension does not match the family")
    X = np.repeat(x, N, axis=0)
    ids = np.arange(N, dtype=np.int64)
    return EmpiricalMeasure.uniform(_advance(family, sampler, X, ids, 0, KERNEL))


def coupled_chains(x, y, K: int, sampler: IndexSampler, family: OperatorFamily,
                   chain_id: int = 0):
    """Run two chains on identical draws.

    Returns ``(dist, psi)``: ``dist[k] = ||X_k^x - X_k^y||`` for ``k = 0..K``
    and the per-step transport discrepancies ``psi[k]``.
    """
    Z = np.vstack([np.asarray(x, float), np.asarray(y, float)])
    ids = np.array([chain_id, chain_id])
    dist = np.empty(K + 1)
    psi = np.empty(K)
    dist[0] = np.linalg.norm(Z[0] - Z[1])
    for k in range(K):
        Zn = _advance(family, sampler, Z, ids, k)
        d = (Zn[0] - Z[0]) - (Zn[1] - Z[1])
        psi[k] = d @ d
        Z = Zn
        dist[k + 1] = np.linalg.norm(Z[0] - Z[1])
    return dist, psi
