"""Entropic optimal transport between unlabeled and labeled image embeddings,
solved by Sinkhorn-Knopp matrix scaling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core_math import as_matrix, cosine_matrix
from .errors import BadLambda, DimMismatch, LengthMismatch, NonFinite, ZeroKernelRow

DEFAULT_ITERATIONS = 10


@dataclass(frozen=True)
class TransportPlan:
    values: np.ndarray
    row_marginal: np.ndarray
    col_marginal: np.ndarray
    iterations_run: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def uniform(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)


def cost_from_embeddings(u, x) -> np.ndarray:
    """Cost ``1 - u_i . x_j`` between unit embeddings (0 for equal, 2 for antipodal)."""
    return 1.0 - cosine_matrix(u, x)


def _check_marginal(p, n: int, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64).ravel()
    if p.shape[0] != n:
        raise LengthMismatch(f"{name} has length {p.shape[0]}, expected {n}")
    if np.any(p <= 0) or not np.all(np.isfinite(p)):
        raise ValueError(f"{name} must be strictly positive and finite")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"{name} must sum to 1 (got {p.sum():.12g})")
    return p


def solve(
    cost,
    p=None,
    q=None,
    lam: float = 0.07,
    iterations: int = DEFAULT_ITERATIONS,
) -> TransportPlan:
    """Run ``iterations`` rounds of Sinkhorn-Knopp scaling.

    The scaling vectors start uniform, so ``iterations=0`` returns the kernel
    ``exp(-C / lam)`` rescaled to unit total mass. Each round updates the row
    scaling ``a <- p / (K b)`` and then the column scaling ``b <- q / (K^T a)``.
    There is no early stopping; use :func:`marginal_residual` to inspect
    convergence.
    """
    c = as_matrix(cost)
    if not np.all(np.isfinite(c)):
        raise NonFinite("cost matrix contains NaN or infinity")
    if not (lam > 0 and np.isfinite(lam)):
        raise BadLambda(f"lambda must be positive, got {lam}")
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    m, n = c.shape
    p = uniform(m) if p is None else _check_marginal(p, m, "p")
    q = uniform(n) if q is None else _check_marginal(q, n, "q")

    kernel = np.exp(-c / lam)
    dead = np.flatnonzero(kernel.sum(axis=1) == 0.0)
    if dead.size:
        raise ZeroKernelRow(int(dead[0]))

    a = uniform(m)
    b = uniform(n)
    for _ in range(iterations):
        a = p / (kernel @ b)
        b = q / (kernel.T @ a)

    plan = a[:, None] * kernel * b[None, :]
    if iterations == 0:
        plan = plan / plan.sum()
    return TransportPlan(plan, p, q, iterations)


def marginal_residual(plan: TransportPlan) -> tuple[float, float]:
    """Sup-norm violation of the row and column marginal constraints."""
    g = plan.values
    row = float(np.abs(g.sum(axis=1) - plan.row_marginal).max())
    col = float(np.abs(g.sum(axis=0) - plan.col_marginal).max())
    return row, col


def solve_embeddings(u, x, lam: float, iterations: int = DEFAULT_ITERATIONS) -> TransportPlan:
    u = as_matrix(u)
    x = as_matrix(x)
    if u.shape[1] != x.shape[1]:
        raise DimMismatch(f"dimension mismatch: {u.shape[1]} vs {x.shape[1]}")
    return solve(cost_from_embeddings(u, x), lam=lam, iterations=iterations)
