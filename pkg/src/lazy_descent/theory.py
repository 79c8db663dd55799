"""Closed-form asymptotics for random-features ridge regression.

Implements the saddle point of the scalar action S0, the replica actions for
the vanilla / ensemble / divide-and-conquer channels, the six fluctuation
prefactors, the Hessian-trace evaluation of the Psi scalars, and the error
formulas (bias-variance decomposition, K-learner ensembling, divide and
conquer, ridge optimization).

Conventions: psi1 = P/D, psi2 = N/D, lambda > 0. Activations are internally
shifted to zero mean (mu0 = 0); only mu1 and mu_star^2 enter the formulas.
All prefactors are D-normalized, so no system size appears anywhere here.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Sequence, Tuple

import numpy as np

from .numerics import Quadrature, fd_hessian, gauss_hermite, solve_symmetric

__all__ = [
    "ActivationMoments",
    "ModelParams",
    "SaddlePoint",
    "PsiSet",
    "ErrorDecomposition",
    "relu",
    "activation_moments",
    "relu_moments",
    "action_S0",
    "solve_saddle",
    "action_vanilla",
    "action_ensemble",
    "action_divide",
    "prefactor",
    "psi_terms",
    "decompose_error",
    "ensemble_error",
    "divide_conquer_error",
    "optimal_lambda",
]


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ActivationMoments:
    """Gaussian projections of the activation: mean, linear part, residual.

    mu0 is reported for completeness but downstream formulas assume the
    shifted activation sigma - mu0.
    """

    mu0: float
    mu1: float
    mu_star_sq: float

    def __post_init__(self):
        if self.mu_star_sq < 0:
            raise ValueError(f"mu_star_sq must be >= 0, got {self.mu_star_sq}")

    @property
    def mu_star(self) -> float:
        return math.sqrt(self.mu_star_sq)


@dataclass(frozen=True)
class ModelParams:
    """A full parameter point of the asymptotic theory."""

    psi1: float
    psi2: float
    lam: float
    moments: ActivationMoments
    F: float = 1.0
    tau: float = 0.0
    tau_test: float = 0.0

    def __post_init__(self):
        if self.psi1 <= 0 or self.psi2 <= 0:
            raise ValueError("psi1 and psi2 must be strictly positive")
        if self.lam <= 0:
            raise ValueError("lambda must be strictly positive")
        if self.F < 0 or self.tau < 0 or self.tau_test < 0:
            raise ValueError("F, tau, tau_test must be non-negative")


@dataclass(frozen=True)
class SaddlePoint:
    q: float
    r: float
    grad_norm: float


@dataclass(frozen=True)
class PsiSet:
    """The six asymptotic scalars assembling every error component."""

    psi1_term: float
    psi2_v: float
    psi3_v: float
    psi2_e: float
    psi3_e: float
    psi2_d: float


@dataclass(frozen=True)
class ErrorDecomposition:
    noise: float
    init: float
    samp: float
    bias: float
    total: float


# ---------------------------------------------------------------------------
# Activation moments
# ---------------------------------------------------------------------------


def relu(u):
    return np.maximum(0.0, u)


def _kink_safe_rule(order: int) -> Quadrature:
    """Composite Gauss-Legendre rule for N(0,1), exact across a kink at 0.

    Panels on each side of the origin with `order` nodes per panel; the
    Gaussian density is folded into the weights. Integrates piecewise-smooth
    activations (kink at 0) to near machine precision.
    """
    edges = [0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 5.0, 6.5, 8.0, 10.0, 13.0]
    gl_x, gl_w = np.polynomial.legendre.leggauss(max(order, 8))
    nodes, weights = [], []
    for sign in (-1.0, 1.0):
        for lo, hi in zip(edges[:-1], edges[1:]):
            mid, half = (lo + hi) / 2.0, (hi - lo) / 2.0
            x = sign * (mid + half * gl_x)
            w = half * gl_w * np.exp(-x * x / 2.0) / math.sqrt(2.0 * math.pi)
            nodes.append(x)
            weights.append(w)
    nodes = np.concatenate(nodes)
    weights = np.concatenate(weights)
    idx = np.argsort(nodes)
    weights = weights[idx] / weights.sum()
    return Quadrature(nodes=nodes[idx], weights=weights)


def activation_moments(sigma: Callable, quadrature_order: int = 80) -> ActivationMoments:
    """Compute (mu0, mu1, mu_star^2) of an activation under u ~ N(0,1).

    Uses a kink-safe composite rule so that piecewise-smooth activations
    (ReLU in particular) converge far below 1e-10. A plain Gauss-Hermite
    rule would lose mu0 accuracy to the kink at the origin.
    """
    quad = _kink_safe_rule(quadrature_order)
    s = np.asarray(sigma(quad.nodes), dtype=float)
    if s.shape != quad.nodes.shape:
        s = np.broadcast_to(s, quad.nodes.shape)
    mu0 = float(quad.weights @ s)
    mu1 = float(quad.weights @ (quad.nodes * s))
    second = float(quad.weights @ (s * s))
    ms2 = second - mu0 * mu0 - mu1 * mu1
    if ms2 < -1e-12:
        raise ValueError(
            f"negative residual variance mu_star^2 = {ms2:.3e}; "
            "activation violates assumptions or quadrature is too coarse"
        )
    return ActivationMoments(mu0=mu0, mu1=mu1, mu_star_sq=max(ms2, 0.0))


def relu_moments() -> ActivationMoments:
    """Closed-form ReLU moments: (1/sqrt(2 pi), 1/2, 1/4 - 1/(2 pi))."""
    return ActivationMoments(
        mu0=1.0 / math.sqrt(2.0 * math.pi),
        mu1=0.5,
        mu_star_sq=0.25 - 1.0 / (2.0 * math.pi),
    )


# ---------------------------------------------------------------------------
# Scalar action S0 and its saddle
# ---------------------------------------------------------------------------


def _ab(params: ModelParams) -> Tuple[float, float]:
    m = params.moments
    return m.mu1 ** 2 * params.psi1, m.mu_star_sq * params.psi1


def action_S0(q: float, r: float, params: ModelParams) -> float:
    """The scalar action controlling the saddle point, exactly as printed."""
    a, b = _ab(params)
    if q <= 0:
        raise ValueError(f"q must be > 0, got {q}")
    if r <= 0:
        raise ValueError(f"r must be > 0, got {r}")
    L = 1.0 + a * r
    if L <= 0:
        raise ValueError(f"log argument 1 + mu1^2 psi1 r = {L} is not positive")
    inner = b * q / L + 1.0
    if inner <= 0:
        raise ValueError(f"log argument of the mu_star^2 term is not positive ({inner})")
    p1, p2, lam = params.psi1, params.psi2, params.lam
    return (
        lam * p1 ** 2 * p2 * q
        + p2 * math.log(inner)
        + r / q
        + (1.0 - p1) * math.log(q)
        + p2 * math.log(L)
        - math.log(r)
    )


def _grad_S0(q: float, r: float, params: ModelParams) -> Tuple[float, float]:
    """(dS0/dq, dS0/dr); these equal the printed f^v and g^v."""
    a, b = _ab(params)
    p1, p2, lam = params.psi1, params.psi2, params.lam
    T = 1.0 + a * r + b * q
    dq = lam * p1 ** 2 * p2 + p2 * b / T + (1.0 - p1) / q - r / q ** 2
    dr = p2 * a / T + 1.0 / q - 1.0 / r
    return dq, dr


def _hess_S0(q: float, r: float, params: ModelParams) -> np.ndarray:
    a, b = _ab(params)
    p1, p2 = params.psi1, params.psi2
    T = 1.0 + a * r + b * q
    dqq = -p2 * b ** 2 / T ** 2 + 2.0 * r / q ** 3 - (1.0 - p1) / q ** 2
    dqr = -p2 * a * b / T ** 2 - 1.0 / q ** 2
    drr = -p2 * a ** 2 / T ** 2 + 1.0 / r ** 2
    return np.array([[dqq, dqr], [dqr, drr]])


_SADDLE_STARTS = [(q0, r0) for q0 in (1.0, 0.1, 10.0) for r0 in (1.0, 0.1, 10.0)]


def solve_saddle(params: ModelParams, tol: float = 1e-12) -> SaddlePoint:
    """Solve grad S0 = 0 in log-coordinates with damped Newton, multi-start.

    The tolerance is scaled by the natural gradient magnitude (the lambda
    term), since the achievable residual floor grows with it in floating
    point.
    """
    tol = tol * (1.0 + params.lam * params.psi1 ** 2 * params.psi2)

    def grad_log(u: np.ndarray) -> np.ndarray:
        try:
            q, r = math.exp(u[0]), math.exp(u[1])
            return np.array(_grad_S0(q, r, params))
        except (OverflowError, ZeroDivisionError):
            return np.full(2, np.nan)  # off-domain probe; Newton backtracks

    def jac_log(u: np.ndarray) -> np.ndarray:
        try:
            q, r = math.exp(u[0]), math.exp(u[1])
            H = _hess_S0(q, r, params)
            return H * np.array([q, r])  # chain rule for u = log(q), log(r)
        except (OverflowError, ZeroDivisionError):
            return np.full((2, 2), np.nan)

    from .numerics import newton_solve

    best = None
    found = None
    for q0, r0 in _SADDLE_STARTS:
        res = newton_solve(
            grad_log, x0=[math.log(q0), math.log(r0)], jacobian=jac_log,
            tol=tol, max_iter=200,
        )
        if res.converged:
            q, r = math.exp(res.solution[0]), math.exp(res.solution[1])
            # A spurious near-stationary branch exists at huge (q, r) where
            # the gradient components cancel; the physical root has the
            # smaller action (the lambda * q term explodes on the runaway).
            s_val = action_S0(q, r, params)
            cand = (s_val, SaddlePoint(q=q, r=r, grad_norm=res.residual_norm))
            if found is None or cand[0] < found[0]:
                found = cand
        elif best is None or res.residual_norm < best.residual_norm:
            best = res
    if found is not None:
        return found[1]
    raise RuntimeError(
        f"saddle-point iteration failed to converge; best residual "
        f"{best.residual_norm:.3e} at {np.exp(best.solution)}"
    )


# ---------------------------------------------------------------------------
# Replica actions
# ---------------------------------------------------------------------------


def _fe_ge(q: float, r: float, params: ModelParams) -> Tuple[float, float]:
    """Quadratic tilde coefficients of the ensemble action.

    Two appendix listings of these differ by a factor two; the convention
    below (no extra 1/2, matching the divide-and-conquer listing) is the one
    that reproduces the finite-size trace estimates, and is frozen by a
    regression test.
    """
    m = params.moments
    p1, p2 = params.psi1, params.psi2
    c = 1.0 + q * m.mu_star_sq * p1
    num = (
        2.0 * r * m.mu1 ** 2 * p1 * c
        + c ** 2
        - r ** 2 * m.mu1 ** 4 * p1 ** 2 * (p2 - 1.0)
    )
    T = 1.0 + r * m.mu1 ** 2 * p1 + q * m.mu_star_sq * p1
    fe = num / (r ** 2 * T ** 2)
    ge = p1 / q ** 2
    return fe, ge


def action_vanilla(q, r, qt, rt, params: ModelParams) -> float:
    fv, gv = _grad_S0(q, r, params)
    return 2.0 * (action_S0(q, r, params) + qt * fv + rt * gv)


def action_ensemble(q, r, qt, rt, params: ModelParams) -> float:
    fe, ge = _fe_ge(q, r, params)
    return action_S0(q, r, params) + rt ** 2 * fe + qt ** 2 * ge


def action_divide(q, r, qt, rt, params: ModelParams) -> float:
    return action_S0(q, r, params) + rt ** 2 / r ** 2 + params.psi1 * qt ** 2 / q ** 2


# ---------------------------------------------------------------------------
# Prefactors
# ---------------------------------------------------------------------------


def _E(off: float) -> np.ndarray:
    return np.array([[0.0, off], [off, 0.0]])


def _mats_vanilla(q, r, qt, rt, params: ModelParams):
    """The 2x2 order-parameter matrices of the vanilla channel (linear in tildes)."""
    m = params.moments
    a, b = _ab(params)
    L = 1.0 + a * r
    T = L + b * q
    if L <= 0 or T <= 0:
        raise ValueError("order-parameter matrices undefined: non-positive denominator")
    M_X = np.diag([r / L, r / L]) + _E(rt / L ** 2)
    mw_off = m.mu1 ** 2 * m.mu_star_sq * params.psi1 ** 2 * q ** 2 * rt / T ** 2
    M_W = np.diag([q * L / T, q * L / T]) + _E(mw_off)
    # exact linearization of R (I + a R)^-2 in the pair direction
    nx_off = rt * (1.0 - a * r) / L ** 3
    N_X = np.diag([r / L ** 2, r / L ** 2]) + _E(nx_off)
    return M_X, M_W, N_X


def _mats_ensemble(q, r, qt, rt, params: ModelParams):
    """As the vanilla channel, plus the qtilde coupling entering M_W."""
    m = params.moments
    a, b = _ab(params)
    L = 1.0 + a * r
    T = L + b * q
    M_X, M_W, N_X = _mats_vanilla(q, r, qt, rt, params)
    M_W = M_W + _E(L ** 2 * qt / T ** 2)
    return M_X, M_W, N_X


def _mats_divide(q, r, qt, rt, params: ModelParams):
    """Scalar order parameters of the divide-and-conquer channel."""
    a, b = _ab(params)
    L = 1.0 + a * r
    T = L + b * q
    M_X = r / L
    M_W = q * L / T
    N_X = rt / L ** 2
    return M_X, M_W, N_X


def _bracket_psi3(M_X, M_W, params: ModelParams) -> float:
    m = params.moments
    k2 = (m.mu1 * m.mu_star * params.psi1) ** 2
    MXW = M_X @ M_W
    return (
        m.mu1 ** 2 * (M_X[0, 1] + k2 * (MXW @ M_X)[0, 1])
        - 2.0 * m.mu1 ** 2 * m.mu_star_sq * params.psi1 * MXW[0, 1]
        + m.mu_star_sq * M_W[0, 1]
    )


def _bracket_psi2(M_X, M_W, N_X, params: ModelParams) -> float:
    m = params.moments
    p1, p2 = params.psi1, params.psi2
    k2 = (m.mu1 * m.mu_star * p1) ** 2
    MXW = M_X @ M_W
    P_XX = (
        p2 * N_X[0, 1]
        + M_X[0, 1]
        + 2.0 * p2 * k2 * (M_X @ N_X @ M_W)[0, 1]
        + k2 * (MXW @ M_X)[0, 1]
        + p2 * k2 ** 2 * (MXW @ N_X @ M_W @ M_X)[0, 1]
    )
    P_WX = (
        p2 * (N_X @ M_W)[0, 1]
        + MXW[0, 1]
        + p2 * k2 * (MXW @ N_X @ M_W)[0, 1]
    )
    P_WW = M_W[0, 1] + p2 * k2 * (M_W @ N_X @ M_W)[0, 1]
    return (
        m.mu1 ** 2 * P_XX
        - 2.0 * m.mu1 ** 2 * m.mu_star_sq * p1 * P_WX
        + m.mu_star_sq * P_WW
    )


PREFACTOR_KINDS = ("psi1", "psi2_v", "psi3_v", "psi2_e", "psi3_e", "psi2_d")


def prefactor(kind: str, q, r, qt, rt, params: ModelParams) -> float:
    """D-normalized fluctuation prefactor for one of the six Psi scalars."""
    m = params.moments
    p1, p2 = params.psi1, params.psi2
    if kind == "psi1":
        M_X, M_W, _ = _mats_vanilla(q, r, qt, rt, params)
        MXW = M_X @ M_W
        k2 = (m.mu1 * m.mu_star * p1) ** 2
        return p1 * p2 * m.mu1 ** 2 * (
            M_X[0, 0] + k2 * (MXW @ M_X)[0, 0] - m.mu_star_sq * p1 * MXW[0, 0]
        )
    if kind in ("psi2_v", "psi3_v"):
        M_X, M_W, N_X = _mats_vanilla(q, r, qt, rt, params)
        tilde = m.mu1 ** 2 * rt + m.mu_star_sq * qt
        if kind == "psi3_v":
            return p1 ** 2 * p2 * tilde * _bracket_psi3(M_X, M_W, params)
        return p1 ** 2 * p2 * tilde * _bracket_psi2(M_X, M_W, N_X, params)
    if kind in ("psi2_e", "psi3_e"):
        M_X, M_W, N_X = _mats_ensemble(q, r, qt, rt, params)
        tilde = m.mu1 ** 2 * rt
        if kind == "psi3_e":
            return p1 ** 2 * p2 * tilde * _bracket_psi3(M_X, M_W, params)
        return p1 ** 2 * p2 * tilde * _bracket_psi2(M_X, M_W, N_X, params)
    if kind == "psi2_d":
        M_X, M_W, N_X = _mats_divide(q, r, qt, rt, params)
        k2 = (m.mu1 * m.mu_star * p1) ** 2
        P_XX = (
            N_X
            + 2.0 * k2 * N_X * M_W * M_X
            + k2 ** 2 * M_X ** 2 * M_W ** 2 * N_X
        )
        P_WX = N_X * M_W + k2 * M_X * M_W ** 2 * N_X
        P_WW = k2 * M_W ** 2 * N_X
        return (
            m.mu1 ** 2 * p1 * p2 ** 2 * rt
            * (p1 * m.mu1 ** 2 * P_XX
               - 2.0 * m.mu_star_sq * m.mu1 ** 2 * p1 ** 2 * P_WX
               + m.mu_star_sq * p1 * P_WW)
        )
    raise ValueError(f"unknown prefactor kind {kind!r}")


# ---------------------------------------------------------------------------
# Vanilla channel: exact replica-pair fluctuations
# ---------------------------------------------------------------------------


def _matrix_action(Q: np.ndarray, R: np.ndarray, params: ModelParams) -> float:
    """Replica-matrix action; reduces to 2n * S0 on diagonal (qI, rI)."""
    a, b = _ab(params)
    p1, p2, lam = params.psi1, params.psi2, params.lam
    n = Q.shape[0]
    I = np.eye(n)
    GX = I + a * R
    GW = I + b * np.linalg.solve(GX, Q)
    sign_x, ld_x = np.linalg.slogdet(GX)
    sign_w, ld_w = np.linalg.slogdet(GW)
    sign_q, ld_q = np.linalg.slogdet(Q)
    sign_r, ld_r = np.linalg.slogdet(R)
    if min(sign_x, sign_w, sign_q, sign_r) <= 0:
        raise ValueError("replica matrix action undefined: non-positive determinant")
    return (
        p2 * ld_x
        + p2 * ld_w
        + lam * p1 ** 2 * p2 * np.trace(Q)
        + float(np.trace(np.linalg.solve(Q.T, R.T)))
        + (1.0 - p1) * ld_q
        - ld_r
    )


def _matrix_prefactor(kind: str, Q: np.ndarray, R: np.ndarray, params: ModelParams) -> float:
    """Exact matrix-function prefactor of the vanilla channel (12-entry)."""
    m = params.moments
    a, b = _ab(params)
    p1, p2 = params.psi1, params.psi2
    n = Q.shape[0]
    I = np.eye(n)
    GX = I + a * R
    M_X = np.linalg.solve(GX.T, R.T).T            # R (I + aR)^-1
    M_W = np.linalg.solve((I + b * np.linalg.solve(GX, Q)).T, Q.T).T
    tilde = p1 ** 2 * p2 * (m.mu1 ** 2 * R[0, 1] + m.mu_star_sq * Q[0, 1])
    if kind == "psi3_v":
        return tilde * _bracket_psi3(M_X, M_W, params)
    if kind == "psi2_v":
        N_X = np.linalg.solve(GX.T, M_X.T).T      # R (I + aR)^-2
        return tilde * _bracket_psi2(M_X, M_W, N_X, params)
    raise ValueError(f"unknown vanilla prefactor kind {kind!r}")


def _psi_vanilla(kind: str, sp: SaddlePoint, params: ModelParams, step: float) -> float:
    """Tr over the off-diagonal replica-pair fluctuation block.

    The action is linear in the replica-symmetric off-diagonal coordinate, so
    the fluctuation Hessian must be taken along an individual pair direction
    of the full matrix action; a two-replica block is exact for this.
    """
    E = np.array([[0.0, 1.0], [1.0, 0.0]])
    I2 = np.eye(2)

    # Dimensionless pair coordinates (relative to the saddle scales), so the
    # finite-difference step is well conditioned even when q*, r* are large.
    # The trace is invariant under this common reparametrization.
    def s(z):
        return _matrix_action(sp.q * (I2 + z[0] * E), sp.r * (I2 + z[1] * E), params)

    def p(z):
        return _matrix_prefactor(
            kind, sp.q * (I2 + z[0] * E), sp.r * (I2 + z[1] * E), params
        )

    H_S = fd_hessian(s, [0.0, 0.0], step=step)
    H_P = fd_hessian(p, [0.0, 0.0], step=step)
    return float(np.trace(solve_symmetric(H_S, H_P)))


# ---------------------------------------------------------------------------
# Psi evaluation via Hessian traces
# ---------------------------------------------------------------------------

_E_KINDS = ("psi2_e", "psi3_e", "psi2_d")


def _psi_trace(kind: str, sp: SaddlePoint, params: ModelParams, step: float) -> float:
    """Fluctuation trace for the ensemble / divide channels.

    These actions are quadratic in the conjugate coordinates with no cross
    coupling to (q, r), and the prefactor's (q, r) Hessian block vanishes at
    the saddle, so the trace reduces to the conjugate 2x2 block alone. This
    also keeps the evaluation stable when the (q, r) Hessian of the action
    degenerates at small regularization near the interpolation threshold.
    """
    if kind == "psi2_d":
        f_c, g_c = 1.0 / sp.r ** 2, params.psi1 / sp.q ** 2
    else:
        f_c, g_c = _fe_ge(sp.q, sp.r, params)
    H_P = fd_hessian(
        lambda t: prefactor(kind, sp.q, sp.r, t[0], t[1], params), [0.0, 0.0], step=step
    )
    return H_P[0, 0] / (2.0 * g_c) + H_P[1, 1] / (2.0 * f_c)


def psi_terms(params: ModelParams, step: float = 1e-4) -> PsiSet:
    """Evaluate the six Psi scalars at the saddle of S0.

    Psi1's prefactor is tilde-independent at leading order and is evaluated
    directly at the saddle; the other five come from Tr[H[S]^-1 H[P]] with
    finite-difference 4x4 Hessians.
    """
    sp = solve_saddle(params)
    psi1_val = prefactor("psi1", sp.q, sp.r, 0.0, 0.0, params)
    values = {k: _psi_trace(k, sp, params, step) for k in _E_KINDS}
    values["psi2_v"] = _psi_vanilla("psi2_v", sp, params, step)
    values["psi3_v"] = _psi_vanilla("psi3_v", sp, params, step)
    return PsiSet(psi1_term=psi1_val, **values)


# ---------------------------------------------------------------------------
# Error formulas
# ---------------------------------------------------------------------------


def _check_K(K) -> float:
    if K != math.inf and (K < 1 or int(K) != K):
        raise ValueError(f"K must be a positive integer or inf, got {K}")
    return 0.0 if K == math.inf else 1.0 / K


def decompose_error(psis: PsiSet, params: ModelParams, K=1) -> ErrorDecomposition:
    """Noise / init / sampling variances and bias of the K-averaged predictor."""
    invK = _check_K(K)
    F2, t2 = params.F ** 2, params.tau ** 2
    noise = t2 * (psis.psi3_e + invK * (psis.psi3_v - psis.psi3_e))
    init = F2 * invK * (psis.psi2_v - psis.psi2_e)
    samp = F2 * (psis.psi2_e - psis.psi2_d)
    bias = F2 * (1.0 - 2.0 * psis.psi1_term + psis.psi2_d)
    total = noise + init + samp + bias + params.tau_test ** 2
    return ErrorDecomposition(noise=noise, init=init, samp=samp, bias=bias, total=total)


def ensemble_error(psis: PsiSet, params: ModelParams, K=1) -> float:
    """Test error of K independently initialized learners sharing the dataset."""
    invK = _check_K(K)
    F2, t2 = params.F ** 2, params.tau ** 2
    return (
        F2 * (1.0 - 2.0 * psis.psi1_term)
        + invK * (F2 * psis.psi2_v + t2 * psis.psi3_v)
        + (1.0 - invK) * (F2 * psis.psi2_e + t2 * psis.psi3_e)
    )


def divide_conquer_error(params: ModelParams, K=1, step: float = 1e-4) -> float:
    """Test error of K learners trained on disjoint 1/K splits of the data.

    All Psi terms are recomputed at the effective sample ratio psi2 / K.
    """
    invK = _check_K(K)
    if invK == 0.0:
        raise ValueError("K = inf is not supported (psi2/K would vanish)")
    eff = replace(params, psi2=params.psi2 * invK)
    psis = psi_terms(eff, step=step)
    F2, t2 = params.F ** 2, params.tau ** 2
    return (
        F2 * (1.0 - 2.0 * psis.psi1_term)
        + invK * (F2 * psis.psi2_v + t2 * psis.psi3_v)
        + (1.0 - invK) * F2 * psis.psi2_d
    )


def optimal_lambda(
    params: ModelParams, K, lambda_grid: Sequence[float]
) -> Tuple[float, float]:
    """Grid-minimize the ensemble error over lambda; ties go to smaller lambda."""
    grid = sorted(set(float(l) for l in lambda_grid))
    if not grid:
        raise ValueError("lambda grid must be non-empty")
    if any(l <= 0 for l in grid):
        raise ValueError("lambda grid values must be > 0")
    best = None
    for lam in grid:
        try:
            p = replace(params, lam=lam)
            err = ensemble_error(psi_terms(p), p, K)
        except (RuntimeError, np.linalg.LinAlgError, ValueError) as exc:
            warnings.warn(f"skipping lambda={lam:g}: {exc}")
            continue
        if best is None or err < best[1]:
            best = (lam, err)
    if best is None:
        raise RuntimeError("every lambda grid point failed to converge")
    return best
