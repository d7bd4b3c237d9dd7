"""Centralised ground truth: max-min assignments, threshold graphs, matchings, gaps."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

BRUTEFORCE_MAX_N = 9


@dataclass(frozen=True)
class MaxMinSolution:
    rho_star: float
    assignment: tuple[int, ...]  # agent -> arm


@dataclass(frozen=True)
class ThresholdGraph:
    tau: float
    adjacency: np.ndarray  # adjacency[n, m] iff R[n, m] >= tau

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]


@lru_cache(maxsize=None)
def _permutations(n: int) -> np.ndarray:
    return np.array(list(itertools.permutations(range(n))), dtype=np.int64).reshape(-1, n)


def maxmin_bruteforce(R) -> MaxMinSolution:
    """Enumerate all N! assignments. Ties go to the lexicographically smallest."""
    R = _square(R)
    n = R.shape[0]
    if n > BRUTEFORCE_MAX_N:
        raise ValueError(f"brute force limited to N <= {BRUTEFORCE_MAX_N}, got {n}")
    perms = _permutations(n)
    values = R[np.arange(n), perms].min(axis=1)
    best = int(np.argmax(values))  # first maximum == lexicographically smallest
    return MaxMinSolution(float(values[best]), tuple(int(a) for a in perms[best]))


def threshold_graph(R, tau: float) -> ThresholdGraph:
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    R = _square(R)
    return ThresholdGraph(float(tau), R >= tau)


def has_perfect_matching(g: ThresholdGraph | np.ndarray) -> tuple[bool, tuple[int, ...] | None]:
    """Maximum cardinality matching (Hopcroft-Karp). Returns (exists, witness)."""
    adj = g.adjacency if isinstance(g, ThresholdGraph) else np.asarray(g, dtype=bool)
    n = adj.shape[0]
    if not adj.any(axis=1).all() or not adj.any(axis=0).all():
        return False, None
    match = maximum_bipartite_matching(csr_matrix(adj, dtype=np.int8), perm_type="column")
    if np.any(match < 0):
        return False, None
    return True, tuple(int(m) for m in match[:n])


def maxmin_by_bisection(R, epsilon: float = 1e-9) -> MaxMinSolution:
    """Max-min value by doubling then bisection on the threshold graph.

    The returned ``rho_star`` is the last feasible threshold: it never exceeds
    the true optimum and is within ``epsilon`` of it.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    R = _square(R)
    tau_min, witness = 0.0, None
    tau = 1.0
    cap = 2.0 * max(float(R.max()), 1.0)
    while True:  # doubling
        ok, match = has_perfect_matching(threshold_graph(R, tau))
        if not ok:
            tau_max = tau
            break
        tau_min, witness = tau, match
        tau *= 2.0
        if tau > cap:
            raise AssertionError("doubling exceeded its cap")
    while tau_max - tau_min >= epsilon:
        tau = 0.5 * (tau_min + tau_max)
        if tau in (tau_min, tau_max):  # interval below float resolution
            break
        ok, match = has_perfect_matching(threshold_graph(R, tau))
        if ok:
            tau_min, witness = tau, match
        else:
            tau_max = tau
    if witness is None:
        # only reachable if every positive threshold is infeasible, i.e. rho* <= 0
        witness = tuple(range(R.shape[0]))
    return MaxMinSolution(tau_min, witness)


def maxmin_exact(R) -> MaxMinSolution:
    """Exact optimum for any N: the max-min value is one of the matrix entries,
    so bisect over the sorted distinct entries with matching tests."""
    R = _square(R)
    values = np.unique(R)
    lo, hi = 0, len(values) - 1  # values[lo] is always feasible
    best = has_perfect_matching(R >= values[lo])[1]
    while lo < hi:
        mid = (lo + hi + 1) // 2
        ok, match = has_perfect_matching(R >= values[mid])
        if ok:
            lo, best = mid, match
        else:
            hi = mid - 1
    return MaxMinSolution(float(values[lo]), best)


def assignment_value(R, assignment) -> float:
    R = np.asarray(R, dtype=float)
    return float(R[np.arange(R.shape[0]), np.asarray(assignment)].min())


def min_gap(R) -> float:
    """Smallest absolute difference between two entries of the same row."""
    R = _square(R)
    if R.shape[0] < 2:
        raise ValueError("min_gap needs N >= 2")
    s = np.sort(R, axis=1)
    return float(np.diff(s, axis=1).min())


def _square(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    if R.ndim != 2 or R.shape[0] != R.shape[1] or R.shape[0] == 0:
        raise ValueError(f"expected a non-empty square matrix, got shape {R.shape}")
    return R
