"""Dense box-constrained convex QP.

Minimises ``0.5 x'Hx + g'x`` subject to ``lb <= x <= ub`` with a projected
Newton method: Newton steps on the free variables, a projected Armijo line
search, and the clamped set recomputed every iteration. Once the active set
settles the free-subspace Newton step is exact, so convergence is finite in
practice for the small, well-conditioned problems the MPC produces.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from numpy.typing import NDArray

from gpmpc.errors import NumericalError


@dataclass
class QpResult:
    x: NDArray[np.float64]
    kkt_residual: float
    iterations: int
    converged: bool


def kkt_residual(H: NDArray, g: NDArray, lb: NDArray, ub: NDArray, x: NDArray) -> float:
    """Infinity norm of the projected-gradient step, zero exactly at a KKT point."""
    grad = H @ x + g
    return float(np.max(np.abs(x - np.clip(x - grad, lb, ub)), initial=0.0))


def box_qp(
    H: NDArray,
    g: NDArray,
    lb: NDArray,
    ub: NDArray,
    x0: NDArray | None = None,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> QpResult:
    n = g.shape[0]
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    np.clip(x, lb, ub, out=x)

    def value(z: NDArray) -> float:
        return float(0.5 * z @ (H @ z) + g @ z)

    f = value(x)
    it = 0
    for it in range(max_iter):
        grad = H @ x + g
        res = float(np.max(np.abs(x - np.clip(x - grad, lb, ub)), initial=0.0))
        if res <= tol:
            return QpResult(x, res, it, True)

        clamped = ((x <= lb) & (grad > 0)) | ((x >= ub) & (grad < 0))
        free = ~clamped
        step = np.zeros(n)
        if free.any():
            Hff = H[np.ix_(free, free)]
            try:
                c = scipy.linalg.cho_factor(Hff, lower=True, check_finite=False)
            except np.linalg.LinAlgError as exc:
                raise NumericalError("reduced QP Hessian is not positive definite") from exc
            step[free] = -scipy.linalg.cho_solve(c, grad[free], check_finite=False)

        alpha = 1.0
        while True:
            cand = np.clip(x + alpha * step, lb, ub)
            fc = value(cand)
            if fc <= f + 1e-4 * grad @ (cand - x) or alpha < 1e-12:
                break
            alpha *= 0.5
        if fc > f:
            # no descent along the projected arc; the best iterate is the current one
            break
        x, f = cand, fc

    grad = H @ x + g
    res = float(np.max(np.abs(x - np.clip(x - grad, lb, ub)), initial=0.0))
    return QpResult(x, res, it + 1, res <= tol)
