"""Shared linear-algebra core for the stacked multi-output Gaussian term.

Every bound and predictor in the package evaluates (or differentiates)
log N(y_sel | 0, bdiag(B_m + D_m) + Kfu Kuu^-1 Kuf) over a *selection*:
a list of row-index arrays, one per output, saying which observations
appear under which output.  The weakly-supervised model stacks every row
under every output; the fully-labeled baseline selects each row once
under its label; the independent-kernel baselines have no inducing
structure at all (Kfu absent, B_m a dense per-output kernel block).

Exploiting the block structure, one evaluation costs
O(sum_m n_m^3 + (sum_m n_m) Q^2), matching the cost the bound is
documented to have.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import kernels
from .kernels import HyperParams, IndependentSEHyperParams

_LOG2PI = float(np.log(2.0 * np.pi))


@dataclass
class StackedSystem:
    """Factorized covariance pieces of one stacked Gaussian evaluation."""

    rows: list  # per-output row-index arrays
    y_blocks: list  # per-output data vectors
    d_blocks: list  # per-output heteroscedastic noise diagonals
    B_blocks: list  # per-output residual (or full) covariance blocks
    Kfu_blocks: list  # per-output cross blocks, or None (independent model)
    Kuu: np.ndarray  # jittered, or None
    cho_Kuu: tuple
    cho_E: list  # cho_factor of E_m = B_m + D_m
    A: np.ndarray
    cho_A: tuple
    alpha: list  # E_m^-1 y_m
    V: list  # E_m^-1 Kfu_m
    beta: np.ndarray  # sum_m Kfu_m' alpha_m
    c: np.ndarray  # A^-1 beta

    @property
    def has_inducing(self):
        return self.Kfu_blocks is not None


def build_system(X, y, hp, rows, d_blocks):
    """Assemble and factorize the stacked system for a selection.

    hp may be HyperParams (convolved sparse model) or
    IndependentSEHyperParams (independent per-output kernels; the
    cross-covariance between outputs is exactly zero by construction).
    """
    y = np.asarray(y, dtype=float).ravel()
    y_blocks = [y[r] for r in rows]
    if isinstance(hp, IndependentSEHyperParams):
        B_blocks = [
            kernels.se_matrix(X[r], X[r], out) for r, out in zip(rows, hp.outputs)
        ]
        Kfu_blocks = None
        Kuu = cho_Kuu = None
    elif isinstance(hp, HyperParams):
        Kuu_raw = kernels.kuu_matrix(hp.inducing.W, hp.latent)
        cho_Kuu, jitter = kernels.chol_jitter(Kuu_raw)
        Kuu = Kuu_raw + jitter * np.eye(Kuu_raw.shape[0])
        Kfu_blocks = []
        B_blocks = []
        for r, out in zip(rows, hp.outputs):
            Kfu_m = kernels.kfu_matrix(X[r], hp.inducing.W, out, hp.latent)
            Kff_m = kernels.kff_matrix(X[r], X[r], out, out, hp.latent)
            B_m = Kff_m - Kfu_m @ cho_solve(cho_Kuu, Kfu_m.T)
            B_blocks.append(0.5 * (B_m + B_m.T))
            Kfu_blocks.append(Kfu_m)
    else:
        raise TypeError("unsupported hyperparameter container: %r" % type(hp))

    cho_E = []
    alpha = []
    V = []
    for m, B_m in enumerate(B_blocks):
        E_m = B_m + np.diag(d_blocks[m])
        if E_m.shape[0] == 0:
            cho_E.append(None)
            alpha.append(np.zeros(0))
            V.append(None)
            continue
        cho_E.append(cho_factor(E_m, lower=True))
        alpha.append(cho_solve(cho_E[m], y_blocks[m]))
        if Kfu_blocks is not None:
            V.append(cho_solve(cho_E[m], Kfu_blocks[m]))

    if Kfu_blocks is not None:
        Q = Kuu.shape[0]
        A = Kuu.copy()
        beta = np.zeros(Q)
        for m in range(len(rows)):
            if Kfu_blocks[m].shape[0]:
                A += Kfu_blocks[m].T @ V[m]
                beta += Kfu_blocks[m].T @ alpha[m]
        A = 0.5 * (A + A.T)
        cho_A = cho_factor(A, lower=True)
        c = cho_solve(cho_A, beta)
    else:
        A = cho_A = None
        beta = c = None
        V = [None] * len(rows)

    return StackedSystem(
        rows=rows,
        y_blocks=y_blocks,
        d_blocks=d_blocks,
        B_blocks=B_blocks,
        Kfu_blocks=Kfu_blocks,
        Kuu=Kuu,
        cho_Kuu=cho_Kuu,
        cho_E=cho_E,
        A=A,
        cho_A=cho_A,
        alpha=alpha,
        V=V,
        beta=beta,
        c=c,
    )


def _logdet_from_cho(cho):
    return 2.0 * float(np.sum(np.log(np.diag(cho[0]))))


def gauss_loglik(sys: StackedSystem):
    """log N(y_sel | 0, bdiag(E_m) + Kfu Kuu^-1 Kuf) via the Woodbury identity."""
    total_n = sum(len(yb) for yb in sys.y_blocks)
    logdet = 0.0
    quad = 0.0
    for m, yb in enumerate(sys.y_blocks):
        if len(yb) == 0:
            continue
        logdet += _logdet_from_cho(sys.cho_E[m])
        quad += float(yb @ sys.alpha[m])
    if sys.has_inducing:
        logdet += _logdet_from_cho(sys.cho_A) - _logdet_from_cho(sys.cho_Kuu)
        quad -= float(sys.beta @ sys.c)
    return -0.5 * (total_n * _LOG2PI + logdet + quad)


@dataclass
class MatrixGrads:
    """Matrix-level partial derivatives of gauss_loglik.

    dE_blocks[m] is the derivative w.r.t. E_m = B_m + D_m (it doubles as
    the derivative w.r.t. the same-output covariance block K_ff_m, whose
    diagonal carries the D_m chain as well); dKfu_blocks and dKuu carry
    the total derivatives w.r.t. the cross and inducing blocks with the
    Nystrom-residual paths already folded in.
    """

    dE_blocks: list
    dKfu_blocks: list
    dKuu: np.ndarray


def gauss_loglik_grads(sys: StackedSystem):
    """Matrix-level gradient of gauss_loglik for the current system."""
    M = len(sys.rows)
    if not sys.has_inducing:
        dE = []
        for m in range(M):
            if len(sys.y_blocks[m]) == 0:
                dE.append(np.zeros((0, 0)))
                continue
            n_m = len(sys.y_blocks[m])
            Em_inv = cho_solve(sys.cho_E[m], np.eye(n_m))
            r_m = sys.alpha[m]
            dE.append(-0.5 * (Em_inv - np.outer(r_m, r_m)))
        return MatrixGrads(dE_blocks=dE, dKfu_blocks=[None] * M, dKuu=None)

    Ainv = cho_solve(sys.cho_A, np.eye(sys.A.shape[0]))
    Kuu_inv = cho_solve(sys.cho_Kuu, np.eye(sys.Kuu.shape[0]))
    c = sys.c
    s = sys.Kuu @ c  # = Kuf (Sigma_t^-1 y)
    r = [sys.alpha[m] - (sys.V[m] @ c if sys.V[m] is not None else 0.0) for m in range(M)]

    dE = []
    dKfu = []
    # accumulators for the Kuu derivative: Kuf G Kfu and its blockwise part
    KufGKfu = np.zeros_like(sys.A)
    KufGpKfu = np.zeros_like(sys.A)
    M1 = sys.A - sys.Kuu
    KufGKfu += M1 - M1 @ Ainv @ M1 - np.outer(s, s)
    for m in range(M):
        n_m = len(sys.y_blocks[m])
        if n_m == 0:
            dE.append(np.zeros((0, 0)))
            dKfu.append(np.zeros((0, sys.Kuu.shape[0])))
            continue
        Em_inv = cho_solve(sys.cho_E[m], np.eye(n_m))
        Vm = sys.V[m]
        G_mm = Em_inv - Vm @ Ainv @ Vm.T - np.outer(r[m], r[m])
        dE.append(-0.5 * G_mm)
        Kfu_m = sys.Kfu_blocks[m]
        M1_m = Kfu_m.T @ Vm
        s_m = Kfu_m.T @ r[m]
        KufGpKfu += M1_m - M1_m @ Ainv @ M1_m - np.outer(s_m, s_m)
        # (G Kfu)_m and the residual-path correction +G_mm Kfu_m
        GKfu_m = Vm - Vm @ (Ainv @ M1) - np.outer(r[m], s)
        dKfu_m = (-GKfu_m + G_mm @ Kfu_m) @ Kuu_inv
        dKfu.append(dKfu_m)
    dKuu = 0.5 * Kuu_inv @ (KufGKfu - KufGpKfu) @ Kuu_inv
    return MatrixGrads(dE_blocks=dE, dKfu_blocks=dKfu, dKuu=dKuu)


def predictive_weights(sys: StackedSystem):
    """Pieces reused by the posterior predictor.

    Returns (c, Ainv_applied) where mean_m(x*) = K_{f*_m,u} c under the
    default full-data weighting of the stacked observations.
    """
    return sys.c


def solve_A(sys: StackedSystem, B):
    return cho_solve(sys.cho_A, B)


def solve_Kuu(sys: StackedSystem, B):
    return cho_solve(sys.cho_Kuu, B)


def solve_E(sys: StackedSystem, m, b):
    return cho_solve(sys.cho_E[m], b)
