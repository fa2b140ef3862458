"""Ground-truth shape sampling and greedy model-to-ground-truth matching."""
from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass

import numpy as np


@dataclass
class MatchResult:
    # assignment[k] = index of the model shape matched to ground-truth shape k
    assignment: np.ndarray
    distances: np.ndarray

    @property
    def total(self):
        return float(self.distances.sum())


def sample_simplex(count, dim, rng):
    """Points uniform on the probability simplex (normalized Exp(1) draws)."""
    e = rng.exponential(1.0, size=(count, dim))
    return e / e.sum(axis=1, keepdims=True)


def sample_gt_shapes(experts, k_max, rng, weights=None):
    """Random convex combinations of the expert shapes.

    experts: (E, J, 2).  Returns (k_max, J, 2).  ``weights`` overrides the
    random simplex draw, shape (k_max, E).
    """
    experts = np.asarray(experts, dtype=np.float64)
    if experts.ndim != 3 or experts.shape[0] == 0:
        raise ValueError("need a nonempty expert set of shape (E, J, 2)")
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    if weights is None:
        weights = sample_simplex(k_max, experts.shape[0], rng)
    return np.einsum("ke,ejd->kjd", np.asarray(weights, dtype=np.float64), experts)


def shape_distance(a, b):
    """Euclidean norm of the flattened difference between two shapes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape_distance: point counts differ, {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def distance_matrix(gt_shapes, model_shapes):
    """(k, l) matrix of Euclidean distances between flattened shapes."""
    g = np.asarray(gt_shapes, dtype=np.float64).reshape(len(gt_shapes), -1)
    m = np.asarray(model_shapes, dtype=np.float64).reshape(len(model_shapes), -1)
    if g.shape[1] != m.shape[1]:
        raise ValueError(f"distance_matrix: shape sizes differ, {g.shape[1]} vs {m.shape[1]}")
    return np.sqrt(((g[:, None, :] - m[None, :, :]) ** 2).sum(axis=2))


def greedy_assign(dist):
    """Repeatedly fix the globally cheapest unmatched (k, l) pair.

    dist has ground-truth rows and model columns.  Ties go to the smaller
    row, then the smaller column.
    """
    dist = np.asarray(dist, dtype=np.float64)
    k_max, l_max = dist.shape
    if l_max < k_max:
        raise ValueError(f"need at least as many model shapes ({l_max}) as ground-truth shapes ({k_max})")
    # lexsort keys run last-to-first: distance, then row, then column
    rows, cols = np.indices(dist.shape)
    order = np.lexsort((cols.ravel(), rows.ravel(), dist.ravel()))
    assignment = np.full(k_max, -1, dtype=np.int64)
    used_rows = np.zeros(k_max, dtype=bool)
    used_cols = np.zeros(l_max, dtype=bool)
    matched = 0
    for flat in order:
        k, l = divmod(int(flat), l_max)
        if used_rows[k] or used_cols[l]:
            continue
        assignment[k] = l
        used_rows[k] = used_cols[l] = True
        matched += 1
        if matched == k_max:
            break
    return MatchResult(assignment, dist[np.arange(k_max), assignment])


def greedy_match(model_shapes, gt_shapes):
    return greedy_assign(distance_matrix(gt_shapes, model_shapes))


MAX_ORACLE_SIZE = 8


def optimal_match_oracle(dist):
    """Minimum-cost injective assignment of rows to columns by enumeration."""
    dist = np.asarray(dist, dtype=np.float64)
    k_max, l_max = dist.shape
    if l_max > MAX_ORACLE_SIZE or k_max > l_max:
        raise ValueError(f"oracle handles k <= l <= {MAX_ORACLE_SIZE}, got {k_max}x{l_max}")
    perms = _arrangements(k_max, l_max)
    costs = dist[np.arange(k_max), perms].sum(axis=1)
    assignment = perms[int(np.argmin(costs))].copy()
    return MatchResult(assignment, dist[np.arange(k_max), assignment])


@functools.lru_cache(maxsize=None)
def _arrangements(k, l):
    return np.array(list(itertools.permutations(range(l), k)), dtype=np.int64).reshape(-1, k)
