"""Post-processing of chain and ensemble runs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .engine import CesaroAccumulator, EnsembleHistory, TrajectoryLog, cesaro_pool
from .measures import EmpiricalMeasure, wasserstein
from .operators import Operator, Relaxation

__all__ = [
    "RateFit",
    "HistogramSpec",
    "Histogram",
    "OrbitEscape",
    "geometric_rate_fit",
    "cesaro_convergence_check",
    "cesaro_distances",
    "asymptotic_regularity_check",
    "baillon_bruck_bound",
    "bounded_expectation_check",
    "residual_histogram",
    "histogram_wasserstein",
    "second_moment_trace",
    "split_half_error",
    "pooled_distance",
]


class OrbitEscape(RuntimeError):
    """Relaxed orbit left the declared bounded set."""

    def __init__(self, message, records):
        super().__init__(message)
        self.records = records


@dataclass
class RateFit:
    fitted_rate: float
    r_squared: float
    window: tuple[int, int]
    reference_measure: EmpiricalMeasure
    distances: np.ndarray = field(repr=False, default=None)
    note: str = ""


def _snapshot_ks(snapshots, ks):
    if ks is not None:
        return list(ks)
    if isinstance(snapshots, EnsembleHistory):
        return snapshots.ks
    return list(range(len(snapshots)))


def geometric_rate_fit(snapshots, reference: EmpiricalMeasure, window=None, ks=None,
                       p: float = 2.0, transient: float = 0.1) -> RateFit:
    """Fit ``W_p(mu_k, reference) ~ C rate^k`` by least squares on the log scale.

    ``window = (k_start, k_end)`` selects iterations (inclusive); by default
    the first ``transient`` fraction of the run is skipped.  If a distance
    in the window vanishes the window is cut just before it.
    """
    ks = _snapshot_ks(snapshots, ks)
    if window is None:
        k_end = ks[-1]
        window = (int(math.ceil(transient * k_end)), k_end)
    lo, hi = window
    sel = [i for i, k in enumerate(ks) if lo <= k <= hi]
    d = np.array([wasserstein(snapshots[i], reference, p, coupling=False).value for i in sel])
    kk = np.array([ks[i] for i in sel], dtype=float)
    note = ""
    zero = np.flatnonzero(d <= 0.0)
    if zero.size:
        cut = zero[0]
        note = f"window shrunk at k={int(kk[cut])} where the distance vanished"
        d, kk = d[:cut], kk[:cut]
    if d.size < 3:
        raise ValueError("need at least three snapshots with positive distance in the window")
    y = np.log(d)
    slope, intercept = np.polyfit(kk, y, 1)
    pred = slope * kk + intercept
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return RateFit(float(np.exp(slope)), r2, (int(kk[0]), int(kk[-1])), reference, d, note)


MERGED_LP_CELLS = 40_000


def pooled_distance(a: EmpiricalMeasure, b: EmpiricalMeasure, p: float = 1.0) -> float:
    """``W_p`` between pooled measures, merging repeated atoms when that pays.

    Merged atoms carry unequal weights and need the LP; pooled samples keep
    equal weights and go to the assignment solver.  The LP is used only
    when the merged problem is small.
    """
    ca, cb = a.compress(), b.compress()
    if ca.size * cb.size <= MERGED_LP_CELLS and ca.size * cb.size < a.size * b.size:
        a, b = ca, cb
    return wasserstein(a, b, p, coupling=False).value


def cesaro_convergence_check(history, checkpoints, p: float = 1.0) -> list[tuple[int, float]]:
    """``W_p(nu_k, nu_{2k})`` at each checkpoint ``k``."""
    ks = _snapshot_ks(history, None)
    top = ks[-1] if ks else -1
    out = []
    for k in checkpoints:
        if 2 * k > top:
            raise ValueError(f"history reaches iteration {top}, checkpoint {k} needs {2 * k}")
        d = pooled_distance(cesaro_pool(history, k), cesaro_pool(history, 2 * k), p)
        out.append((int(k), d))
    return out


def cesaro_distances(history, reference: EmpiricalMeasure, p: float = 1.0,
                     every: int = 1) -> list[tuple[int, float]]:
    """``W_p(nu_k, reference)`` for ``k = every, 2 every, ...``.

    Runs a merged-atom accumulator, so it stays cheap for chains that
    revisit a handful of points.  Requires an unthinned history.
    """
    ks = _snapshot_ks(history, None)
    if ks[:2] != [0, 1] or any(b - a != 1 for a, b in zip(ks, ks[1:])):
        raise ValueError("cesaro_distances needs every iteration from 0 on")
    acc = CesaroAccumulator()
    out = []
    for k in range(1, ks[-1] + 1):
        acc.add(history[k])
        if k % every == 0:
            out.append((k, wasserstein(acc.measure(), reference, p, coupling=False).value))
    return out


def baillon_bruck_bound(diam: float, m: int, lam: float) -> float:
    return diam / math.sqrt(math.pi * m * lam * (1.0 - lam))


def asymptotic_regularity_check(T: Operator, lam: float, x0, M: int,
                                diam: float) -> list[tuple[int, float, float]]:
    """Residuals ``||x_m - T x_m||`` of the relaxed iteration with their bounds.

    ``x_m = ((1 - lam) Id + lam T) x_{m-1}``.  The orbit must stay within
    ``diam`` of ``x0``; otherwise :class:`OrbitEscape` is raised carrying the
    records computed so far.
    """
    if not 0.0 < lam < 1.0:
        raise ValueError("lam must lie in (0, 1)")
    Tl = Relaxation(T, lam)
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    x = x0
    records = []
    for m in range(1, M + 1):
        x = Tl(x)
        if np.linalg.norm(x - x0) > diam:
            raise OrbitEscape(f"orbit left the set of diameter {diam} at m={m}", records)
        res = float(np.linalg.norm(x - T(x)))
        records.append((m, res, baillon_bruck_bound(diam, m, lam)))
    return records


def bounded_expectation_check(history, M_cap: float) -> dict:
    """Largest ensemble-mean norm over the run, and whether it stays below ``M_cap``.

    ``history`` may be an ``EnsembleHistory`` (its full log is used), a
    ``TrajectoryLog`` or a list of measures.
    """
    if isinstance(history, EnsembleHistory) and history.log is not None:
        norms = history.log.mean_norms
    elif isinstance(history, TrajectoryLog):
        norms = history.mean_norms
    else:
        norms = np.array([m.weights @ np.linalg.norm(m.atoms, axis=1) for m in history])
    if len(norms) == 0:
        raise ValueError("empty history")
    k = int(np.argmax(norms))
    sup = float(norms[k])
    return {"sup_mean_norm": sup, "argmax_k": k, "cap": float(M_cap), "pass": sup <= M_cap}


@dataclass(frozen=True)
class HistogramSpec:
    """Bin rule: ``"fd"`` (Freedman-Diaconis), ``"width"`` or ``"count"``.

    ``range`` fixes the binned interval; by default the data range is used.
    """

    rule: str = "fd"
    value: float | None = None
    range: tuple[float, float] | None = None


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    def to_dict(self) -> dict:
        return {"edges": self.edges.tolist(), "counts": self.counts.tolist()}


def _edges(values: np.ndarray, spec: HistogramSpec) -> np.ndarray:
    rng = spec.range if spec.range is not None else (float(values.min()), float(values.max()))
    if spec.rule == "fd":
        return np.histogram_bin_edges(values, bins="fd", range=rng)
    if spec.rule == "count":
        return np.histogram_bin_edges(values, bins=int(spec.value), range=rng)
    if spec.rule == "width":
        lo, hi = rng
        n = max(1, int(math.ceil((hi - lo) / spec.value)))
        return lo + spec.value * np.arange(n + 1)
    raise ValueError(f"unknown bin rule {spec.rule!r}")


def residual_histogram(log: TrajectoryLog, window=None,
                       spec: HistogramSpec = HistogramSpec()) -> Histogram:
    """Histogram of step lengths ``||x_{k+1} - x_k||`` for ``k`` in ``window``.

    ``window = (k_start, k_end)`` is half open; default is the whole log.
    """
    lo, hi = (0, log.iterations) if window is None else window
    if not 0 <= lo < hi <= log.iterations:
        raise ValueError(f"window {window} is empty or outside the log")
    vals = np.asarray(log.residuals[lo:hi])
    edges = _edges(vals, spec)
    counts, _ = np.histogram(vals, bins=edges)
    if counts.sum() != vals.size:
        raise AssertionError("histogram dropped samples; widen the range")
    return Histogram(edges, counts)


def histogram_wasserstein(h1: Histogram, h2: Histogram) -> float:
    """W_1 between two histograms on the same bins, atoms at bin centers."""
    if h1.edges.shape != h2.edges.shape or not np.allclose(h1.edges, h2.edges):
        raise ValueError("histograms must share their bin edges")
    c = h1.centers
    m1 = EmpiricalMeasure(c, h1.counts / h1.counts.sum())
    m2 = EmpiricalMeasure(c, h2.counts / h2.counts.sum())
    return wasserstein(m1, m2, 1.0, coupling=False).value


def second_moment_trace(history, center) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ensemble estimates of ``E ||X_k - center||^2`` with their standard errors.

    Returns ``(ks, means, standard_errors)`` over the retained snapshots;
    the error is the sample standard deviation over ``sqrt(N)``.
    """
    ks = np.asarray(_snapshot_ks(history, None))
    center = np.asarray(center, dtype=float)
    means = np.empty(len(ks))
    ses = np.empty(len(ks))
    for i, m in enumerate(history):
        if not m.is_uniform:
            raise ValueError("standard errors need equally weighted particles")
        sq = np.sum((m.atoms - center) ** 2, axis=1)
        means[i] = sq.mean()
        ses[i] = sq.std(ddof=1) / math.sqrt(sq.size) if sq.size > 1 else 0.0
    return ks, means, ses


def split_half_error(measure: EmpiricalMeasure, p: float = 2.0) -> float:
    """``W_p`` between the first and second half of an ensemble's particles.

    The particle count is a free knob; this gauges whether it is large
    enough, since two independent halves of a well-resolved law are close.
    """
    if not measure.is_uniform or measure.size < 2:
        raise ValueError("need an equally weighted ensemble of at least two particles")
    h = measure.size // 2
    a = EmpiricalMeasure.uniform(measure.atoms[:h])
    b = EmpiricalMeasure.uniform(measure.atoms[h:2 * h])
    return wasserstein(a, b, p, coupling=False).value
