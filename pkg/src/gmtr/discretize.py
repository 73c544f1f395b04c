"""Exact discretisation and brute-force oracles for assignment and QAP."""
from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

MAX_QAP_CANDIDATES = 40320


@dataclass
class AssignmentProblem:
    matrix: np.ndarray
    sense: str = "maximize"

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.sense not in ("maximize", "minimize"):
            raise ValueError(f"unknown sense {self.sense!r}")


def _lap_value(m: np.ndarray, maximize: bool) -> float:
    if m.shape[0] == 0 or m.shape[1] == 0:
        return 0.0
    r, c = linear_sum_assignment(m, maximize=maximize)
    return math.fsum(m[r, c])


def _lexicographic_assignment(m: np.ndarray, maximize: bool) -> np.ndarray:
    """Lexicographically smallest optimal column choice per row.

    Rows are fixed in order, each to the smallest column that still admits an
    optimal completion. Values are compared as correctly rounded sums.
    """
    n1, n2 = m.shape
    target = _lap_value(m, maximize)
    cols = np.full(n1, -1, dtype=np.int64)
    free_rows, free_cols = list(range(n1)), list(range(n2))
    fixed = 0.0
    for i in range(n1):
        if len(free_cols) == 0:
            break  # more rows than columns: remaining rows stay unassigned
        rest = free_rows[1:]
        skip = len(free_rows) > len(free_cols)  # leaving row i out may be optimal
        best = None
        for c in free_cols:
            others = [k for k in free_cols if k != c]
            val = math.fsum([fixed, m[i, c], _lap_value(m[np.ix_(rest, others)], maximize)])
            if val == target:
                best = c
                break
        if best is None and skip:
            free_rows = rest
            continue
        if best is None:  # float noise in the optimum; fall back to the solver's choice
            r, c = linear_sum_assignment(m[np.ix_(free_rows, free_cols)], maximize=maximize)
            for rr, cc in zip(r, c):
                cols[free_rows[rr]] = free_cols[cc]
            return cols
        cols[i] = best
        fixed = math.fsum([fixed, m[i, best]])
        free_rows = rest
        free_cols.remove(best)
    return cols


def hungarian(prob: AssignmentProblem) -> tuple[np.ndarray, float]:
    """Optimal (partial) assignment as a 0/1 matrix, plus its objective.

    Ties resolve to the lexicographically smallest assignment (row by row).
    """
    m = prob.matrix
    if m.ndim != 2:
        raise ValueError(f"assignment matrix must be 2-D, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise ValueError("assignment matrix has non-finite entries")
    cols = _lexicographic_assignment(m, prob.sense == "maximize")
    rows = np.flatnonzero(cols >= 0)
    x = np.zeros_like(m)
    x[rows, cols[rows]] = 1.0
    return x, float(m[rows, cols[rows]].sum())


def discretize(soft: np.ndarray) -> np.ndarray:
    """Hard matching from a soft one, via the min-cost assignment on -log(m)."""
    x, _ = hungarian(AssignmentProblem(-np.log(np.asarray(soft) + 1e-12), "minimize"))
    return x


@functools.lru_cache(maxsize=16)
def _injections(n1: int, n2: int) -> np.ndarray:
    """Every injective map of n1 rows into n2 columns, in lexicographic order."""
    out = np.array(list(itertools.permutations(range(n2), n1)), dtype=np.int64)
    out.setflags(write=False)
    return out.reshape(-1, n1)


def brute_force_assignment(score: np.ndarray, maximize: bool = True) -> tuple[tuple, float]:
    """Enumerate every injective row->column map; first optimum in lexicographic order."""
    score = np.asarray(score, dtype=np.float64)
    n1, n2 = score.shape
    if n1 > n2:
        raise ValueError("brute_force_assignment needs n1 <= n2")
    perms = _injections(n1, n2)
    rows = np.arange(n1)
    vals = score[rows, perms].sum(axis=1)
    best = int(np.argmax(vals) if maximize else np.argmin(vals))
    perm = perms[best]
    return tuple(int(c) for c in perm), float(score[rows, perm].sum())


def perm_to_matrix(perm, n2: int | None = None) -> np.ndarray:
    perm = list(perm)
    x = np.zeros((len(perm), n2 if n2 is not None else len(perm)))
    x[np.arange(len(perm)), perm] = 1.0
    return x


def matrix_to_perm(x: np.ndarray) -> np.ndarray:
    """Column of each row's 1, or -1 for an unassigned row."""
    x = np.asarray(x)
    return np.where(x.any(axis=1), x.argmax(axis=1), -1)


def qap_objective(k: np.ndarray, x: np.ndarray) -> float:
    """``vec(X)^T K vec(X)`` with row-major vec."""
    v = np.asarray(x, dtype=np.float64).reshape(-1)
    return float(v @ np.asarray(k) @ v)


def brute_force_qap(k: np.ndarray, n1: int, n2: int) -> tuple[tuple, float]:
    """Exhaustive Lawler-QAP maximisation over injective assignments of n1 rows.

    Ties go to the lexicographically smallest assignment.
    """
    if n1 > n2:
        raise ValueError("brute_force_qap needs n1 <= n2")
    count = math.perm(n2, n1)
    if n1 > 8 or count > MAX_QAP_CANDIDATES:
        raise ValueError(
            f"brute_force_qap limited to n1 <= 8 and {MAX_QAP_CANDIDATES} candidate "
            f"assignments; got n1={n1}, {count} candidates")
    k = np.asarray(k, dtype=np.float64)
    perms = _injections(n1, n2)
    idx = np.arange(n1) * n2 + perms  # (count, n1) positions in vec(X)
    vals = k[idx[:, :, None], idx[:, None, :]].sum(axis=(1, 2))
    best = int(np.argmax(vals))
    return tuple(int(c) for c in perms[best]), float(vals[best])


def matching_accuracy(x: np.ndarray, x_gt: np.ndarray) -> float:
    x, x_gt = np.asarray(x), np.asarray(x_gt)
    if x.shape != x_gt.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_gt.shape}")
    pred, true = matrix_to_perm(x), matrix_to_perm(x_gt)
    return float(np.mean(pred == true))
