"""Finite-size Monte Carlo lab for random-features ridge regression.

Two data-generating models are supported:

- ``true_rf``: features are sigma(Theta x / sqrt(D)) with the activation
  applied elementwise (mean-shifted so the features are centered);
- ``gaussian_covariate``: the equivalent surrogate model, where the
  nonlinearity is replaced by mu1 * Theta x / sqrt(D) plus independent
  Gaussian feature noise of variance mu_star^2.

The Gaussian model admits closed-form test errors and trace estimators for
the six asymptotic scalars, which serve as finite-size cross-checks of the
theory module.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .numerics import ridge_solve
from .theory import ActivationMoments, ErrorDecomposition, relu, relu_moments

__all__ = [
    "SimConfig",
    "Dataset",
    "Learner",
    "SimEstimate",
    "DecompositionEstimate",
    "substream",
    "make_dataset",
    "featurize",
    "fit",
    "test_error_closed_form",
    "test_error_mc",
    "estimate_psi_traces",
    "empirical_decomposition",
    "ensemble_run",
]


_ACTIVATIONS = {"relu": relu, "linear": lambda u: np.asarray(u, dtype=float)}

_MOMENTS = {
    "relu": relu_moments(),
    "linear": ActivationMoments(mu0=0.0, mu1=1.0, mu_star_sq=0.0),
}

# Stream tags for hierarchical seeding; every random object in an experiment
# gets its own (tag, *indices) substream of the experiment seed.
_T_BETA, _T_X, _T_EPS, _T_THETA, _T_W, _T_TEST, _T_TRACE, _T_REP = range(8)


@dataclass(frozen=True)
class SimConfig:
    """Finite-size experiment description.

    ``model`` selects the feature map: "true_rf" or "gaussian_covariate".
    """

    D: int
    P: int
    N: int
    lam: float
    F: float = 1.0
    tau: float = 0.0
    activation: str = "relu"
    model: str = "gaussian_covariate"
    seed: int = 0
    custom_moments: Optional[ActivationMoments] = None

    def __post_init__(self):
        for name in ("D", "P", "N"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v}")
        if self.D < 2:
            raise ValueError("D must be >= 2")
        if self.lam <= 0:
            raise ValueError("lambda must be strictly positive")
        if self.F < 0 or self.tau < 0:
            raise ValueError("F and tau must be non-negative")
        if self.model not in ("true_rf", "gaussian_covariate"):
            raise ValueError(f"unknown model {self.model!r}")
        if self.activation == "custom":
            if self.custom_moments is None:
                raise ValueError("custom activation requires custom_moments")
            if self.model != "gaussian_covariate":
                raise ValueError(
                    "custom activation is moment-only and needs the gaussian_covariate model"
                )
        elif self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def psi1(self) -> float:
        return self.P / self.D

    @property
    def psi2(self) -> float:
        return self.N / self.D

    @property
    def moments(self) -> ActivationMoments:
        if self.activation == "custom":
            return self.custom_moments
        return _MOMENTS[self.activation]


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray       # (N, D)
    beta: np.ndarray    # (D,)
    eps: np.ndarray     # (N,)
    y: np.ndarray       # (N,)


@dataclass(frozen=True)
class Learner:
    Theta: np.ndarray               # (P, D)
    W: Optional[np.ndarray] = None  # (N, P), gaussian model only
    a_hat: Optional[np.ndarray] = None  # (P,), set after fitting


@dataclass(frozen=True)
class SimEstimate:
    mean: float
    std_error: float
    n_outer: int
    n_mid: int
    n_inner: int
    seed: int


@dataclass(frozen=True)
class DecompositionEstimate:
    means: ErrorDecomposition
    std_errors: Dict[str, float]
    n_X: int
    n_Theta: int
    n_eps: int
    seed: int


def substream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for (seed, key); reproducible and collision-free."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=tuple(key)))


def _draw_beta(config: SimConfig, rng: np.random.Generator) -> np.ndarray:
    g = rng.standard_normal(config.D)
    return config.F * g / np.linalg.norm(g)


def make_dataset(
    config: SimConfig,
    beta: Optional[np.ndarray] = None,
    key: Tuple[int, ...] = (),
) -> Dataset:
    """Draw (X, eps) from substreams of the config seed; beta may be pinned.

    ``key`` namespaces the substreams so that replicate datasets under the
    same seed are independent.
    """
    if beta is None:
        beta = _draw_beta(config, substream(config.seed, *key, _T_BETA))
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (config.D,):
        raise ValueError(f"beta must have shape ({config.D},), got {beta.shape}")
    X = substream(config.seed, *key, _T_X).standard_normal((config.N, config.D))
    eps = config.tau * substream(config.seed, *key, _T_EPS).standard_normal(config.N)
    y = X @ beta + eps
    return Dataset(X=X, beta=beta, eps=eps, y=y)


def make_learner(config: SimConfig, key: Tuple[int, ...] = ()) -> Learner:
    Theta = substream(config.seed, *key, _T_THETA).standard_normal((config.P, config.D))
    W = None
    if config.model == "gaussian_covariate":
        W = substream(config.seed, *key, _T_W).standard_normal((config.N, config.P))
    return Learner(Theta=Theta, W=W)


def featurize(learner: Learner, X: np.ndarray, config: SimConfig) -> np.ndarray:
    """Design matrix Z of shape (n, P), scaled by 1/sqrt(D) for the fit."""
    D = config.D
    pre = X @ learner.Theta.T / math.sqrt(D)
    if config.model == "true_rf":
        m = config.moments
        Z = (_ACTIVATIONS[config.activation](pre) - m.mu0) / math.sqrt(D)
    else:
        m = config.moments
        if learner.W is None:
            raise ValueError("gaussian model requires the learner's feature noise W")
        if learner.W.shape != (X.shape[0], config.P):
            raise ValueError(
                f"feature noise W has shape {learner.W.shape}, expected {(X.shape[0], config.P)}"
            )
        Z = (m.mu1 * pre + m.mu_star * learner.W) / math.sqrt(D)
    return Z


def fit(Z: np.ndarray, y: np.ndarray, config: SimConfig) -> np.ndarray:
    """Ridge solution a_hat = (Z^T Z + psi1 psi2 lam I)^{-1} Z^T y / sqrt(D)."""
    c = config.psi1 * config.psi2 * config.lam
    return ridge_solve(Z.T @ Z, c, Z.T @ y) / math.sqrt(config.D)


def _second_layer_vectors(learners: Sequence[Learner], config: SimConfig):
    """Per-learner linear readout v_k = mu1 Theta_k^T a_k / sqrt(D) and |a_k|^2."""
    m = config.moments
    vs, a_sq = [], []
    for lr in learners:
        if lr.a_hat is None:
            raise ValueError("learner has not been fitted")
        vs.append(m.mu1 * (lr.Theta.T @ lr.a_hat) / math.sqrt(config.D))
        a_sq.append(float(lr.a_hat @ lr.a_hat))
    return np.array(vs), np.array(a_sq)


def test_error_closed_form(
    learners: Sequence[Learner], dataset: Dataset, config: SimConfig
) -> float:
    """Exact population test error of the K-averaged Gaussian-model predictor."""
    if config.model != "gaussian_covariate":
        raise ValueError("closed-form test error requires the gaussian_covariate model")
    m = config.moments
    K = len(learners)
    vs, a_sq = _second_layer_vectors(learners, config)
    v_bar = vs.mean(axis=0)
    cross = float(np.linalg.norm(vs.sum(axis=0)) ** 2) / K ** 2
    return (
        config.F ** 2
        - 2.0 * float(dataset.beta @ v_bar)
        + cross
        + m.mu_star_sq * float(a_sq.sum()) / K ** 2
    )


def test_error_mc(
    learners: Sequence[Learner],
    dataset: Dataset,
    config: SimConfig,
    n_test: int = 10_000,
    key: Tuple[int, ...] = (),
) -> SimEstimate:
    """Monte Carlo test error of the averaged predictor on fresh inputs."""
    if n_test < 1:
        raise ValueError("n_test must be >= 1")
    rng = substream(config.seed, *key, _T_TEST)
    X_t = rng.standard_normal((n_test, config.D))
    y_t = X_t @ dataset.beta
    preds = np.zeros(n_test)
    m = config.moments
    for lr in learners:
        if lr.a_hat is None:
            raise ValueError("learner has not been fitted")
        pre = X_t @ lr.Theta.T / math.sqrt(config.D)
        if config.model == "true_rf":
            phi = _ACTIVATIONS[config.activation](pre) - m.mu0
        else:
            phi = m.mu1 * pre + m.mu_star * rng.standard_normal((n_test, config.P))
        preds += phi @ lr.a_hat
    preds /= len(learners)
    sq = (y_t - preds) ** 2
    se = float(sq.std(ddof=1) / math.sqrt(n_test)) if n_test > 1 else 0.0
    return SimEstimate(
        mean=float(sq.mean()),
        std_error=se,
        n_outer=n_test,
        n_mid=len(learners),
        n_inner=0,
        seed=config.seed,
    )


# ---------------------------------------------------------------------------
# Trace estimators of the six asymptotic scalars
# ---------------------------------------------------------------------------


def _trace_sample(config: SimConfig, s: int, identical_learners: bool) -> Dict[str, float]:
    D, P, N = config.D, config.P, config.N
    m = config.moments
    c = config.psi1 * config.psi2 * config.lam
    rng = substream(config.seed, _T_TRACE, s)
    X = rng.standard_normal((N, D))
    Theta1 = rng.standard_normal((P, D))
    W1 = rng.standard_normal((N, P))
    if identical_learners:
        Theta2, W2 = Theta1, W1
    else:
        Theta2 = rng.standard_normal((P, D))
        W2 = rng.standard_normal((N, P))

    def design(Xm, Theta, W):
        return (m.mu1 * (Xm @ Theta.T) / math.sqrt(D) + m.mu_star * W) / math.sqrt(D)

    Z1 = design(X, Theta1, W1)
    Z2 = design(X, Theta2, W2)
    B1 = Z1.T @ Z1 + c * np.eye(P)
    B2 = Z2.T @ Z2 + c * np.eye(P)
    G1 = X.T @ Z1  # (D, P)
    G2 = X.T @ Z2

    out: Dict[str, float] = {}
    inv1 = np.linalg.solve(B1, np.eye(P))
    inv2 = np.linalg.solve(B2, np.eye(P))

    out["psi1_term"] = m.mu1 / D ** 2 * float(np.trace(inv1 @ (Theta1 @ G1)))

    A_v = m.mu1 ** 2 / D * (Theta1 @ Theta1.T) + m.mu_star_sq * np.eye(P)
    M1v = inv1 @ A_v
    out["psi2_v"] = float(np.trace(M1v @ (inv1 @ (G1.T @ G1 / D)))) / D
    out["psi3_v"] = float(np.trace(M1v @ (inv1 @ (Z1.T @ Z1)))) / D

    A_e = m.mu1 ** 2 / D * (Theta1 @ Theta2.T)
    if identical_learners:
        # shared feature noise resurrects the delta term of the covariance
        A_e = A_e + m.mu_star_sq * np.eye(P)
    M1e = inv1 @ A_e
    out["psi2_e"] = float(np.trace(M1e @ (inv2 @ (G2.T @ G1 / D)))) / D
    out["psi3_e"] = float(np.trace(M1e @ (inv2 @ (Z2.T @ Z1)))) / D

    # Divide-and-conquer: the second learner sees an independent dataset.
    Xd = rng.standard_normal((N, D))
    Wd = rng.standard_normal((N, P))
    Z2d = design(Xd, Theta2, Wd)
    B2d = Z2d.T @ Z2d + c * np.eye(P)
    G2d = Xd.T @ Z2d
    out["psi2_d"] = float(
        np.trace(M1e @ np.linalg.solve(B2d, G2d.T @ G1 / D))
    ) / D
    return out


def estimate_psi_traces(
    config: SimConfig,
    n_seeds: int = 20,
    identical_learners: bool = False,
) -> Dict[str, SimEstimate]:
    """Monte Carlo estimates of the six asymptotic scalars at finite size.

    Uses the Gaussian-covariate design; each of ``n_seeds`` replicates draws
    fresh (X, Theta, W). With ``identical_learners=True`` the two learners
    share (Theta, W), which must collapse the e-scalars onto the v-scalars.
    """
    if n_seeds < 2:
        raise ValueError("n_seeds must be >= 2")
    samples = [_trace_sample(config, s, identical_learners) for s in range(n_seeds)]
    result = {}
    for k in samples[0]:
        vals = np.array([s[k] for s in samples])
        result[k] = SimEstimate(
            mean=float(vals.mean()),
            std_error=float(vals.std(ddof=1) / math.sqrt(n_seeds)),
            n_outer=n_seeds,
            n_mid=0,
            n_inner=0,
            seed=config.seed,
        )
    return result


# ---------------------------------------------------------------------------
# Empirical bias-variance decomposition
# ---------------------------------------------------------------------------


class _GramPredictors:
    """Population inner products between fitted Gaussian-model predictors.

    Each predictor is summarized by its effective linear readout
    v = mu1 Theta^T a / sqrt(D) plus the feature-noise energy mu_star^2 |a|^2,
    which is diagonal across distinct learners. This makes every conditional
    mean and variance of the decomposition an exact population quantity.
    """

    def __init__(self, ms2: float):
        self.ms2 = ms2

    def norm_sq(self, v, a_sq):
        return float(v @ v) + self.ms2 * a_sq


def empirical_decomposition(
    config: SimConfig,
    n_X: int = 10,
    n_Theta: int = 10,
    n_eps: int = 10,
    normalization: str = "unbiased",
    n_test: int = 10_000,
) -> DecompositionEstimate:
    """Nested-resampling estimate of the noise/init/samp/bias decomposition.

    Outer loop: datasets (X, with per-dataset noise library eps_k). Middle
    loop: feature draws Theta (and W in the gaussian model). Inner loop: label
    noise. The teacher beta is drawn once per experiment. ``normalization``
    is "unbiased" ((n-1)-denominators on each variance component) or
    "matched" (plug-in sample variances, which telescope exactly so that the
    four components sum to the mean empirical risk).

    Standard errors are jackknife over the outer dataset replicates.
    """
    if min(n_X, n_Theta, n_eps) < 2:
        raise ValueError("n_X, n_Theta, n_eps must all be >= 2")
    if n_X < 3:
        # Jackknife SEs need every leave-one-out subset to retain >= 2 datasets.
        raise ValueError("n_X must be >= 3 for jackknife standard errors")
    if normalization not in ("unbiased", "matched"):
        raise ValueError(f"unknown normalization {normalization!r}")
    gaussian = config.model == "gaussian_covariate"
    beta = _draw_beta(config, substream(config.seed, _T_BETA))

    if gaussian:
        m = config.moments
        gram = _GramPredictors(m.mu_star_sq)
        dim = config.D
    else:
        # Shared fresh test sample defines the empirical L2 inner product.
        rng_t = substream(config.seed, _T_TEST)
        X_t = rng_t.standard_normal((n_test, config.D))
        y_t = X_t @ beta
        dim = n_test

    # Per (i, j): conditional-mean summaries over the noise draws.
    v_bar = np.zeros((n_X, n_Theta, dim))      # readout of mean predictor
    a_bar_sq = np.zeros((n_X, n_Theta))        # |mean_k a|^2 (gaussian only)
    mean_norm = np.zeros((n_X, n_Theta))       # mean_k |f_k|^2
    bar_norm = np.zeros((n_X, n_Theta))        # |mean_k f_k|^2

    for i in range(n_X):
        rx = substream(config.seed, _T_X, i)
        X = rx.standard_normal((config.N, config.D))
        clean = X @ beta
        for j in range(n_Theta):
            # Fresh noise library per (dataset, feature draw): a fully nested
            # design, so the per-level unbiased corrections below are exact.
            re = substream(config.seed, _T_EPS, i, j)
            eps = config.tau * re.standard_normal((n_eps, config.N))
            Y = clean[None, :] + eps  # (n_eps, N)
            rt = substream(config.seed, _T_THETA, i, j)
            Theta = rt.standard_normal((config.P, config.D))
            W = None
            if gaussian:
                W = substream(config.seed, _T_W, i, j).standard_normal((config.N, config.P))
            lr = Learner(Theta=Theta, W=W)
            Z = featurize(lr, X, config)
            c = config.psi1 * config.psi2 * config.lam
            A = ridge_solve(Z.T @ Z, c, Z.T @ Y.T) / math.sqrt(config.D)  # (P, n_eps)
            if gaussian:
                V = config.moments.mu1 * (Theta.T @ A) / math.sqrt(config.D)  # (D, n_eps)
                vb = V.mean(axis=1)
                ab = A.mean(axis=1)
                v_bar[i, j] = vb
                a_bar_sq[i, j] = float(ab @ ab)
                mean_norm[i, j] = float(
                    np.mean(np.sum(V * V, axis=0) + gram.ms2 * np.sum(A * A, axis=0))
                )
                bar_norm[i, j] = gram.norm_sq(vb, a_bar_sq[i, j])
            else:
                pre = X_t @ Theta.T / math.sqrt(config.D)
                phi = _ACTIVATIONS[config.activation](pre) - config.moments.mu0
                Fpred = phi @ A  # (n_test, n_eps)
                fb = Fpred.mean(axis=1)
                v_bar[i, j] = fb
                # empirical L2 norms are means over the shared test sample
                mean_norm[i, j] = float(np.mean(Fpred * Fpred))
                bar_norm[i, j] = float(np.mean(fb * fb))

    def _norm_mix(vecs, a_sqs, coefs):
        """|sum_m c_m f_m|^2 for distinct learners (diagonal noise energy)."""
        v = np.tensordot(coefs, vecs, axes=1)
        if gaussian:
            return float(v @ v) + gram.ms2 * float(np.sum(coefs ** 2 * a_sqs))
        return float(np.mean(v * v))

    def components(keep: np.ndarray) -> Dict[str, float]:
        """Decomposition from the subset `keep` of dataset indices.

        "matched" returns the plug-in variances of the nested sample means,
        which telescope exactly to the mean empirical risk. "unbiased"
        additionally removes the finite-replicate leakage between levels:
        the sample variance across feature draws of the noise-averaged
        predictor contains noise-variance / n_eps, and likewise one level up,
        so each inner component is subtracted with the matching 1/n factor.
        """
        nx = int(keep.sum())
        idx = np.where(keep)[0]
        unbiased = normalization == "unbiased"
        scale_e = n_eps / (n_eps - 1) if unbiased else 1.0
        scale_t = n_Theta / (n_Theta - 1) if unbiased else 1.0
        scale_x = nx / (nx - 1) if unbiased else 1.0

        noise = scale_e * float(np.mean(mean_norm[idx] - bar_norm[idx]))

        g_norm = np.empty(nx)  # |mean_j f_bar_ij|^2 per dataset
        for a, i in enumerate(idx):
            coefs = np.full(n_Theta, 1.0 / n_Theta)
            g_norm[a] = _norm_mix(v_bar[i], a_bar_sq[i], coefs)
        init = scale_t * float(np.mean(bar_norm[idx].mean(axis=1) - g_norm))
        if unbiased:
            init -= noise / n_eps

        flat_v = v_bar[idx].reshape(nx * n_Theta, dim)
        flat_a = a_bar_sq[idx].reshape(nx * n_Theta)
        coefs = np.full(nx * n_Theta, 1.0 / (nx * n_Theta))
        gbar_norm = _norm_mix(flat_v, flat_a, coefs)
        samp = scale_x * float(np.mean(g_norm) - gbar_norm)
        if unbiased:
            samp -= (init + noise / n_eps) / n_Theta

        v_tot = flat_v.mean(axis=0)
        if gaussian:
            bias = (
                config.F ** 2
                - 2.0 * float(beta @ v_tot)
                + gbar_norm
            )
        else:
            bias = float(np.mean((y_t - np.tensordot(coefs, flat_v, axes=1)) ** 2))
        if unbiased:
            bias -= (samp + (init + noise / n_eps) / n_Theta) / nx
        return {
            "noise": noise,
            "init": init,
            "samp": samp,
            "bias": bias,
            "total": noise + init + samp + bias,
        }

    full = components(np.ones(n_X, dtype=bool))

    # Jackknife over datasets.
    jk = {k: np.empty(n_X) for k in full}
    for i in range(n_X):
        keep = np.ones(n_X, dtype=bool)
        keep[i] = False
        ci = components(keep)
        for k in ci:
            jk[k][i] = ci[k]
    ses = {
        k: float(math.sqrt((n_X - 1) / n_X * np.sum((jk[k] - jk[k].mean()) ** 2)))
        for k in jk
    }
    means = ErrorDecomposition(**full)
    return DecompositionEstimate(
        means=means, std_errors=ses, n_X=n_X, n_Theta=n_Theta, n_eps=n_eps,
        seed=config.seed,
    )


# ---------------------------------------------------------------------------
# Ensembling experiments
# ---------------------------------------------------------------------------


def ensemble_run(
    config: SimConfig,
    K: int = 1,
    mode: str = "ensemble",
    n_reps: int = 10,
    n_test: int = 10_000,
) -> SimEstimate:
    """Test error of K learners, ensembled or divide-and-conquer.

    "ensemble": all learners share the dataset (inputs and label noise) and
    differ only in their feature draws. "divide_conquer": the dataset is split
    into K disjoint blocks of N/K samples, one per learner. Averages ``n_reps``
    independent replicates; the standard error is across replicates.
    """
    if mode not in ("ensemble", "divide_conquer"):
        raise ValueError(f"unknown mode {mode!r}")
    if K < 1 or int(K) != K:
        raise ValueError(f"K must be a positive integer, got {K}")
    if mode == "divide_conquer" and config.N % K != 0:
        raise ValueError(f"divide_conquer mode requires K | N, got N={config.N}, K={K}")
    if n_reps < 2:
        raise ValueError("n_reps must be >= 2")

    errs = np.empty(n_reps)
    for rep in range(n_reps):
        ds = make_dataset(config, key=(_T_REP, rep))
        fitted = []
        for k in range(K):
            lr = make_learner(config, key=(_T_REP, rep, k))
            if mode == "ensemble":
                Xk, yk = ds.X, ds.y
                Wk = lr.W
            else:
                blk = slice(k * (config.N // K), (k + 1) * (config.N // K))
                Xk, yk = ds.X[blk], ds.y[blk]
                Wk = lr.W[blk] if lr.W is not None else None
            lrk = Learner(Theta=lr.Theta, W=Wk)
            Z = featurize(lrk, Xk, config)
            c = config.psi1 * (Xk.shape[0] / config.D) * config.lam
            a = ridge_solve(Z.T @ Z, c, Z.T @ yk) / math.sqrt(config.D)
            fitted.append(Learner(Theta=lr.Theta, W=Wk, a_hat=a))
        if config.model == "gaussian_covariate":
            errs[rep] = test_error_closed_form(fitted, ds, config)
        else:
            errs[rep] = test_error_mc(
                fitted, ds, config, n_test=n_test, key=(_T_REP, rep)
            ).mean
    return SimEstimate(
        mean=float(errs.mean()),
        std_error=float(errs.std(ddof=1) / math.sqrt(n_reps)),
        n_outer=n_reps,
        n_mid=K,
        n_inner=0,
        seed=config.seed,
    )
