"""Slow reference implementations used only by the tests."""

import itertools

import numpy as np
from scipy.spatial.distance import cdist


def prokhorov_by_events(mu, nu):
    """Prokhorov-Levy distance by enumerating every union-of-atoms event.

    With closed neighbourhoods the worst violation
    ``h(eps) = max_A mu(A) - nu(A^eps)`` (both directions) is constant on
    each interval between consecutive pairwise distances, so the infimum
    of ``{eps : h(eps) <= eps}`` is found interval by interval.
    """
    D = cdist(mu.atoms, nu.atoms)
    breaks = np.unique(np.concatenate(([0.0], D.ravel())))

    def worst(eps):
        close = D <= eps
        h = 0.0
        for src, dst, M in ((mu, nu, close), (nu, mu, close.T)):
            n = src.size
            for mask in range(1, 1 << n):
                members = [i for i in range(n) if mask >> i & 1]
                reach = np.any(M[members], axis=0)
                h = max(h, src.weights[members].sum() - dst.weights[reach].sum())
        return h

    best = 1.0
    for i, e in enumerate(breaks):
        nxt = breaks[i + 1] if i + 1 < len(breaks) else np.inf
        cand = max(e, worst(e))
        if cand < nxt:
            best = min(best, cand)
    return min(1.0, best)


def wasserstein_by_permutations(x, y, p):
    """W_p between equal-size uniform samples by trying every matching."""
    C = cdist(np.atleast_2d(x), np.atleast_2d(y)) ** p
    n = C.shape[0]
    best = min(C[np.arange(n), list(perm)].sum() for perm in itertools.permutations(range(n)))
    return (best / n) ** (1.0 / p)


def cyclic_projections(A, b, x, sweeps):
    """Plain-loop cyclic projections onto the rows of ``A x = b``."""
    x = np.array(x, dtype=float)
    for _ in range(sweeps):
        for a, beta in zip(A, b):
            x = x - (a @ x - beta) / (a @ a) * a
    return x
