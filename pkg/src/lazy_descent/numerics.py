"""Shared numerical kernels: Gaussian quadrature, root finding, derivatives, solves.

Everything here is a pure function of its inputs and safe to call from
multiple threads.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.polynomial import hermite_e


@dataclass(frozen=True)
class Quadrature:
    """Nodes and weights for expectations against the standard Gaussian N(0,1).

    Weights are normalized so that ``sum(weights) == 1`` (i.e. the quadrature
    integrates the constant function exactly).
    """

    nodes: np.ndarray
    weights: np.ndarray

    def expect(self, f: Callable[[np.ndarray], np.ndarray]) -> float:
        """E[f(u)] for u ~ N(0,1)."""
        return float(np.dot(self.weights, f(self.nodes)))


@dataclass(frozen=True)
class RootResult:
    solution: np.ndarray
    residual_norm: float
    iterations: int
    converged: bool


def gauss_hermite(order: int) -> Quadrature:
    """Gauss-Hermite rule for the probabilists' weight, normalized to N(0,1).

    Exact for polynomials up to degree 2*order - 1.
    """
    if order < 1:
        raise ValueError(f"quadrature order must be >= 1, got {order}")
    nodes, weights = hermite_e.hermegauss(order)
    weights = weights / weights.sum()
    return Quadrature(nodes=nodes, weights=weights)


def _fd_jacobian(f: Callable, x: np.ndarray, fx: np.ndarray, h: float = 1e-7) -> np.ndarray:
    n = x.size
    J = np.empty((fx.size, n))
    for j in range(n):
        step = h * max(1.0, abs(x[j]))
        xp = x.copy()
        xp[j] += step
        J[:, j] = (np.asarray(f(xp), dtype=float) - fx) / step
    return J


def newton_solve(
    f: Callable[[np.ndarray], np.ndarray],
    x0: Sequence[float],
    jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    tol: float = 1e-12,
    max_iter: int = 100,
    max_backtracks: int = 30,
) -> RootResult:
    """Damped Newton iteration with residual-norm backtracking.

    Returns ``converged=True`` iff the final infinity norm of ``f`` is <= tol.
    Singular Jacobians and non-finite residuals are reported as
    non-convergence, never raised.
    """
    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    fx = np.atleast_1d(np.asarray(f(x), dtype=float))
    if not np.all(np.isfinite(fx)):
        return RootResult(x, float("inf"), 0, False)
    res = float(np.max(np.abs(fx)))
    for it in range(1, max_iter + 1):
        if res <= tol:
            return RootResult(x, res, it - 1, True)
        J = jacobian(x) if jacobian is not None else _fd_jacobian(f, x, fx)
        J = np.atleast_2d(np.asarray(J, dtype=float))
        try:
            dx = np.linalg.solve(J, -fx)
        except np.linalg.LinAlgError:
            return RootResult(x, res, it - 1, False)
        if not np.all(np.isfinite(dx)):
            return RootResult(x, res, it - 1, False)
        # Backtrack: halve the step until the residual norm decreases.
        t = 1.0
        for _ in range(max_backtracks + 1):
            x_new = x + t * dx
            f_new = np.atleast_1d(np.asarray(f(x_new), dtype=float))
            if np.all(np.isfinite(f_new)) and np.max(np.abs(f_new)) < res:
                break
            t *= 0.5
        else:
            return RootResult(x, res, it, False)
        x, fx = x_new, f_new
        res = float(np.max(np.abs(fx)))
    return RootResult(x, res, max_iter, res <= tol)


def fd_hessian(
    f: Callable[[np.ndarray], float],
    x: Sequence[float],
    step: float = 1e-4,
) -> np.ndarray:
    """Finite-difference Hessian with one level of Richardson extrapolation.

    Central second differences at step sizes h and h/2 are combined as
    (4*H_{h/2} - H_h) / 3, cancelling the leading O(h^2) error. The result is
    symmetrized. Per-coordinate steps scale with max(1, |x_i|).
    """
    if step <= 0:
        raise ValueError(f"step must be > 0, got {step}")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    h = step * np.maximum(1.0, np.abs(x))

    def eval_at(z: np.ndarray) -> float:
        v = float(f(z))
        if not np.isfinite(v):
            raise FloatingPointError(f"non-finite function value at probe point {z!r}")
        return v

    def hess_at(h: np.ndarray) -> np.ndarray:
        n = x.size
        H = np.empty((n, n))
        f0 = eval_at(x)
        for i in range(n):
            ei = np.zeros(n)
            ei[i] = h[i]
            H[i, i] = (eval_at(x + ei) - 2.0 * f0 + eval_at(x - ei)) / h[i] ** 2
            for j in range(i + 1, n):
                ej = np.zeros(n)
                ej[j] = h[j]
                H[i, j] = H[j, i] = (
                    eval_at(x + ei + ej)
                    - eval_at(x + ei - ej)
                    - eval_at(x - ei + ej)
                    + eval_at(x - ei - ej)
                ) / (4.0 * h[i] * h[j])
        return H

    H = (4.0 * hess_at(h / 2.0) - hess_at(h)) / 3.0
    return (H + H.T) / 2.0


def solve_symmetric(A: np.ndarray, B: np.ndarray, cond_threshold: float = 1e13) -> np.ndarray:
    """Solve A X = B by pivoted factorization; raises on near-singular A."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > cond_threshold:
        raise np.linalg.LinAlgError(
            f"matrix is numerically singular (condition estimate {cond:.3e})"
        )
    return np.linalg.solve(A, B)


def ridge_solve(G: np.ndarray, c: float, v: np.ndarray) -> np.ndarray:
    """Solve (G + c I) x = v via Cholesky, falling back to LU if indefinite."""
    G = np.asarray(G, dtype=float)
    v = np.asarray(v, dtype=float)
    A = G + c * np.eye(G.shape[0])
    try:
        L = np.linalg.cholesky(A)
        y = np.linalg.solve(L, v)
        return np.linalg.solve(L.T, y)
    except np.linalg.LinAlgError:
        if c < 0:
            raise ValueError("regularized matrix is not positive definite (c < 0)")
        return np.linalg.solve(A, v)
