"""Differentiable Sinkhorn normalisation, run in log space for stability."""
from __future__ import annotations

import math

import numpy as np

from . import numerics as nx
from .numerics import Tensor


class NonFiniteError(ValueError):
    pass


def sinkhorn(scores, iters: int = 50, tau: float = 0.05) -> Tensor:
    """Alternate row/column normalisation of ``exp(scores / tau)``.

    Square inputs: rows then columns each iteration, so columns are exact on
    exit. For n1 < n2, columns are pulled to mass n1/n2 and rows normalised
    last, giving a row-stochastic result. n1 > n2 is handled by transposition.
    """
    scores = nx.as_tensor(scores)
    if iters < 1:
        raise ValueError("sinkhorn needs iters >= 1")
    if tau <= 0:
        raise ValueError("sinkhorn needs tau > 0")
    if not np.isfinite(scores.data).all():
        raise NonFiniteError("sinkhorn received non-finite scores")
    n1, n2 = scores.shape
    if n1 > n2:
        return nx.transpose(sinkhorn(nx.transpose(scores), iters, tau))
    log_s = scores * (1.0 / tau)
    if n1 == n2:
        for _ in range(iters):
            log_s = nx.log_normalize(log_s, axis=1)
            log_s = nx.log_normalize(log_s, axis=0)
    else:
        col_mass = math.log(n1 / n2)
        for _ in range(iters):
            log_s = nx.log_normalize(log_s, axis=0, log_target=col_mass)
            log_s = nx.log_normalize(log_s, axis=1)
    return nx.exp(log_s)


def marginal_trace(scores: np.ndarray, iters: int = 50, tau: float = 0.05) -> np.ndarray:
    """Marginal deviation ``0.5 * (|rows - 1|_1 + |cols - 1|_1)`` after each square iteration."""
    log_s = np.asarray(scores, dtype=np.float64) / tau
    if log_s.shape[0] != log_s.shape[1]:
        raise ValueError("marginal_trace is defined for square inputs")
    out = np.empty(iters)
    with nx.no_grad():
        for t in range(iters):
            log_s = nx.log_normalize(nx.log_normalize(log_s, axis=1), axis=0)
            m = np.exp(log_s.data)
            out[t] = 0.5 * (np.abs(m.sum(1) - 1).sum() + np.abs(m.sum(0) - 1).sum())
    return out
