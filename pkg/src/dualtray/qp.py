"""Dense primal active-set solver for small convex QPs.

    minimize    0.5 x' H x + g' x
    subject to  A x <= b

``H`` must be positive definite.  The method starts from a feasible point
and keeps every iterate feasible, so a caller that stops early still holds
a point satisfying all constraints.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels


class QpInfeasible(ValueError):
    pass


@dataclass
class QpResult:
    x: np.ndarray
    active: list[int]
    multipliers: np.ndarray  # one per constraint, zero when inactive
    objective: float
    iterations: int
    kkt_residual: float
    converged: bool
    info: dict = field(default_factory=dict)


def kkt_residual(H, g, A, b, x, lam) -> float:
    """Max-norm of stationarity, primal/dual infeasibility and complementarity."""
    stat = H @ x + g + A.T @ lam
    slack = A @ x - b
    return float(
        max(
            np.max(np.abs(stat), initial=0.0),
            np.max(slack, initial=0.0),
            np.max(-lam, initial=0.0),
            np.max(np.abs(lam * slack), initial=0.0),
        )
    )


def solve(
    H: np.ndarray,
    g: np.ndarray,
    A: np.ndarray,
    b: np.ndarray,
    x0: np.ndarray,
    working: list[int] | None = None,
    max_iter: int = 200,
    tol: float = 1e-12,
) -> QpResult:
    """Primal active-set method from the feasible point ``x0``.

    ``working`` optionally seeds the working set (e.g. from the previous
    solve); entries not active at ``x0`` or linearly dependent are dropped.
    Each iteration solves the equality-constrained subproblem through the
    Schur complement of ``H``; the loop itself is compiled.
    """
    H = np.ascontiguousarray(H, dtype=float)
    g = np.ascontiguousarray(g, dtype=float)
    A = np.ascontiguousarray(np.asarray(A, dtype=float).reshape(-1, H.shape[0]))
    b = np.ascontiguousarray(b, dtype=float)
    x = np.array(x0, dtype=float)
    feas_tol = 1e-9 * (1.0 + np.max(np.abs(b), initial=0.0))
    if np.any(A @ x - b > feas_tol):
        raise QpInfeasible("starting point violates the constraints")
    try:
        np.linalg.cholesky(H)
    except np.linalg.LinAlgError as exc:
        raise ValueError("H must be positive definite") from exc
    W0 = np.asarray(working if working else [], dtype=np.int64)
    x, W, lam_w, it, converged = _kernels.active_set(H, g, A, b, x, W0, max_iter, tol)
    lam = np.zeros(A.shape[0])
    if W.size and lam_w.size == W.size:
        lam[W] = lam_w
    obj = float(0.5 * x @ H @ x + g @ x)
    return QpResult(
        x=x,
        active=[int(i) for i in W],
        multipliers=lam,
        objective=obj,
        iterations=int(it),
        kkt_residual=kkt_residual(H, g, A, b, x, lam),
        converged=bool(converged),
    )


def box_constraints(lo: np.ndarray, hi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``A x <= b`` rows for ``lo <= x <= hi``."""
    n = lo.size
    I = np.eye(n)
    return np.vstack([I, -I]), np.concatenate([hi, -lo])
