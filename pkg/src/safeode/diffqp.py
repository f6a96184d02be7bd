"""Differentiable projection QP.

Solves ``min ||y_hat - y||^2  s.t.  a_j . y_hat + c_j >= 0`` exactly with a
dual active-set method and differentiates the solution map through the
KKT system of the active rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import core
from .hocbf import LinearRow

FEAS_TOL = 1e-8
KKT_TOL = 1e-8
DUP_TOL = 1e-10


class QPError(RuntimeError):
    pass


class QPInfeasibleError(QPError):
    """No point satisfies all rows; ``row`` is the most violated one."""

    def __init__(self, row: int, message: str | None = None):
        super().__init__(message or f"QP infeasible (most violated row {row})")
        self.row = row


class QPSolverError(QPError):
    """Iteration cap reached."""


class DegenerateActiveSetError(QPError):
    """Active rows are linearly dependent; the KKT matrix is singular."""


@dataclass
class QPProblem:
    y: np.ndarray
    rows: list[LinearRow] = field(default_factory=list)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        if self.y.ndim != 1 or self.y.size < 1:
            raise ValueError("reference vector must be 1-D and non-empty")

    @property
    def q(self) -> int:
        return self.y.size

    def matrices(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.rows:
            return np.zeros((0, self.q)), np.zeros(0)
        A = np.array([np.asarray(r.a, dtype=float) for r in self.rows])
        c = np.array([float(r.c) for r in self.rows])
        if A.shape[1] != self.q:
            raise ValueError("row width does not match decision dimension")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(c))):
            raise ValueError("non-finite QP rows")
        return A, c


@dataclass
class QPSolution:
    y_hat: np.ndarray
    duals: np.ndarray
    active_set: tuple[int, ...]


@dataclass
class QPGradients:
    d_y: np.ndarray
    d_rows: list[tuple[np.ndarray, float]]


def solve(p: QPProblem, max_iter: int = 64) -> QPSolution:
    A, c = p.matrices()
    x, lam, working, status, worst = core.qp_solve(p.y, A, c, FEAS_TOL, max_iter)
    if status == core.QP_INFEASIBLE:
        raise QPInfeasibleError(int(worst))
    if status == core.QP_MAXITER:
        raise QPSolverError("active-set iteration cap reached")
    if status == core.QP_DEGENERATE:
        raise DegenerateActiveSetError("singular working-set system")
    return QPSolution(x, lam, tuple(int(j) for j in np.flatnonzero(working)))


def backward(p: QPProblem, sol: QPSolution, upstream) -> QPGradients:
    """Gradients of ``upstream . y_hat`` with respect to ``y`` and each row."""
    A, c = p.matrices()
    g = np.asarray(upstream, dtype=float)
    dy, dA, dc, status = core.qp_backward(A.reshape(-1, p.q), sol.y_hat, sol.duals, g)
    if status != core.QP_OK:
        raise DegenerateActiveSetError("active rows are linearly dependent")
    return QPGradients(np.asarray(dy), [(dA[j].copy(), float(dc[j])) for j in range(len(p.rows))])


def solve_batch(ps: Sequence[QPProblem]) -> list[QPSolution | QPError]:
    """Solve independently; failures are returned in place, not raised."""
    out: list[QPSolution | QPError] = []
    for p in ps:
        try:
            out.append(solve(p))
        except QPError as exc:
            out.append(exc)
    return out


def kkt_residuals(p: QPProblem, sol: QPSolution) -> dict[str, float]:
    """Worst violation of each KKT condition (all should be <= 1e-8)."""
    A, c = p.matrices()
    if A.shape[0] == 0:
        return {
            "primal": 0.0,
            "dual": 0.0,
            "complementarity": 0.0,
            "stationarity": float(np.max(np.abs(2 * (sol.y_hat - p.y)))),
        }
    s = A @ sol.y_hat + c
    return {
        "primal": float(max(0.0, -s.min())),
        "dual": float(max(0.0, -sol.duals.min())),
        "complementarity": float(np.max(np.abs(sol.duals * s))),
        "stationarity": float(np.max(np.abs(2 * (sol.y_hat - p.y) - A.T @ sol.duals))),
    }
