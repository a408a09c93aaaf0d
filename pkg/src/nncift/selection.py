"""Subset selection from an influence kernel or pointwise scores.

Facility location f(S) = sum over columns j of max_{i in S} K[i, j]
rewards covering every target with at least one similar selected
sample. It is monotone submodular, so greedy selection carries the
(1 - 1/e) approximation guarantee. The greedy here is lazy: stale
marginal gains sit in a max-heap and are only recomputed when they
surface, which is equivalent to the naive rescan because gains only
shrink as the selection grows.

Ranking selectors (top-k by row maximum, top-k by pointwise score)
cover the methods that order samples instead of covering targets.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .datasets import exact_ceil
from .errors import CoverageError
from .influence import InfluenceMatrix, PointwiseScores


@dataclass(frozen=True)
class SelectionResult:
    """Selected fine-tuning indices in pick order, with the objective
    value after each pick."""

    indices: list[int]
    objective_values: list[float]
    budget: int

    def __post_init__(self):
        if len(self.indices) != len(set(self.indices)):
            raise ValueError("selected indices must be distinct")
        if len(self.indices) != len(self.objective_values):
            raise ValueError("one objective value per pick required")


def normalize_kernel(matrix: InfluenceMatrix) -> InfluenceMatrix:
    """Affinely map all values onto [0, 1], preserving their order.

    A constant matrix maps to all zeros (the declared degenerate rule).
    Facility location needs a nonnegative kernel; influence values may
    be negative.
    """
    if not matrix.fully_valid:
        raise CoverageError("kernel normalization requires a fully valid matrix")
    values = matrix.values.astype(np.float64)
    lo = float(values.min()) if values.size else 0.0
    hi = float(values.max()) if values.size else 0.0
    if hi == lo:
        return InfluenceMatrix.full(np.zeros_like(values, dtype=np.float32))
    return InfluenceMatrix.full(((values - lo) / (hi - lo)).astype(np.float32))


def _gain(kernel: np.ndarray, row: int, covered: np.ndarray) -> float:
    """Marginal facility-location gain of adding `row` given the current
    per-column best coverage."""
    return float(np.maximum(kernel[row] - covered, 0.0).sum())


def _checked_kernel(matrix: InfluenceMatrix, budget: int) -> np.ndarray:
    if budget < 1:
        raise ValueError("facility location needs budget >= 1")
    if not matrix.fully_valid:
        raise CoverageError("facility location requires a fully valid kernel")
    kernel = matrix.values.astype(np.float64)
    if kernel.size and (kernel.min() < 0.0 or kernel.max() > 1.0):
        raise ValueError("facility location expects a kernel in [0, 1]; normalize first")
    return kernel


def facility_location_greedy(matrix: InfluenceMatrix, budget: int) -> SelectionResult:
    """Greedy maximization of f(S) with lazy gain re-evaluation.

    Ties break toward the smallest row index. Returns min(budget, m)
    picks; the objective trace is non-decreasing.
    """
    kernel = _checked_kernel(matrix, budget)
    m = kernel.shape[0]
    covered = np.zeros(kernel.shape[1], dtype=np.float64)
    # heap of (-gain, row); stamps mark the iteration a gain was computed in
    heap: list[tuple[float, int]] = [(-_gain(kernel, i, covered), i) for i in range(m)]
    heapq.heapify(heap)
    last_eval = [1] * m
    indices: list[int] = []
    objective_values: list[float] = []
    objective = 0.0
    for iteration in range(1, min(budget, m) + 1):
        while True:
            neg_gain, row = heapq.heappop(heap)
            if last_eval[row] == iteration:
                break
            fresh = _gain(kernel, row, covered)
            last_eval[row] = iteration
            heapq.heappush(heap, (-fresh, row))
        objective += -neg_gain
        indices.append(row)
        objective_values.append(objective)
        covered = np.maximum(covered, kernel[row])
    return SelectionResult(indices=indices, objective_values=objective_values, budget=budget)


def facility_location_naive(matrix: InfluenceMatrix, budget: int) -> SelectionResult:
    """Reference greedy that rescans every candidate's gain each step.

    Exists to pin the lazy implementation: both call the same _gain, so
    their float arithmetic is identical and the index sequences must
    match exactly.
    """
    kernel = _checked_kernel(matrix, budget)
    m = kernel.shape[0]
    covered = np.zeros(kernel.shape[1], dtype=np.float64)
    chosen: set[int] = set()
    indices: list[int] = []
    objective_values: list[float] = []
    objective = 0.0
    for _ in range(min(budget, m)):
        best_row, best_gain = -1, -1.0
        for row in range(m):
            if row in chosen:
                continue
            gain = _gain(kernel, row, covered)
            if gain > best_gain:
                best_row, best_gain = row, gain
        chosen.add(best_row)
        indices.append(best_row)
        objective += best_gain
        objective_values.append(objective)
        covered = np.maximum(covered, kernel[best_row])
    return SelectionResult(indices=indices, objective_values=objective_values, budget=budget)


def facility_location_value(kernel: np.ndarray, subset) -> float:
    """f(S) evaluated directly; the brute-force oracle for tests."""
    subset = list(subset)
    if not subset:
        return 0.0
    return float(kernel[subset].max(axis=0).sum())


def topk_rowmax(matrix: InfluenceMatrix, k: int) -> SelectionResult:
    """Rank rows by their strongest single target match and keep the
    top k; ties toward the smaller index."""
    if not matrix.fully_valid:
        raise CoverageError("row ranking requires a fully valid matrix")
    m = matrix.m
    if not 0 <= k <= m:
        raise ValueError(f"k must lie in [0, {m}], got {k}")
    scores = matrix.values.astype(np.float64).max(axis=1)
    order = np.lexsort((np.arange(m), -scores))
    indices = [int(i) for i in order[:k]]
    running = np.cumsum(scores[order[:k]])
    return SelectionResult(indices=indices, objective_values=[float(v) for v in running], budget=k)


def topk_pointwise(scores: PointwiseScores, k: int) -> SelectionResult:
    """Top k scores among the scored indices; ties toward the smaller
    dataset index."""
    count = len(scores.indices)
    if not 0 <= k <= count:
        raise ValueError(f"k must lie in [0, {count}], got {k}")
    order = np.lexsort((scores.indices, -scores.values))
    picked = order[:k]
    indices = [int(scores.indices[i]) for i in picked]
    running = np.cumsum(scores.values[picked])
    return SelectionResult(indices=indices, objective_values=[float(v) for v in running], budget=k)


def budget_from_fraction(v: float | str, m: int) -> int:
    """ceil(v * m), computed on the decimal the caller wrote."""
    return exact_ceil(v, m)
