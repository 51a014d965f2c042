"""The KL-corrected bound, its assignment-entropy terms, and exact oracles.

The collapsed bound is

    L = log N(y_tiled | 0, B + Kfu Kuu^-1 Kuf + D) + V

where D is the block-diagonal heteroscedastic matrix with entries
sigma_m^2 / pi_hat[n, m] and V collects

    - KL(q(Z_labeled) || p(Z_labeled | prior))
    - KL(q(Z_unlabeled) q(Pi) || p(Z_unlabeled | Pi) p(Pi))
    + 0.5 * sum_{n,m} log[(2 pi sigma_m^2)^(1 - pi_hat) / pi_hat].

With the Dirichlet parameter at its analytic optimum alpha0 + pi_hat,
the unlabeled KL reduces to the closed form
sum pi log pi - log[B(alpha0 + pi) / B(alpha0 * 1)] per row, evaluated
through log-gamma.  Removing the Dirichlet prior replaces it with the
plain categorical KL against a fixed uniform prior.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp

from . import _backend, engine, kernels
from .model import (
    Dataset,
    ModelConfig,
    VariationalState,
    floor_simplex,
)

_LOG2PI = float(np.log(2.0 * np.pi))

ORACLE_MAX_ASSIGNMENTS = 2**20


@dataclass
class DMatrix:
    """Stacked heteroscedastic diagonal, output-major ordering."""

    diag: np.ndarray
    n: int
    m: int

    def block(self, m):
        return self.diag[m * self.n : (m + 1) * self.n]


def compute_D(state: VariationalState, noise: kernels.NoiseParams):
    """Noise-inflation diagonal with entries sigma_m^2 / pi_hat[n, m]."""
    pi = state.pi_hat
    n, m = pi.shape
    diag = np.concatenate([noise.sigma[j] ** 2 / pi[:, j] for j in range(m)])
    return DMatrix(diag=diag, n=n, m=m)


# ---------------------------------------------------------------------------
# the V term
# ---------------------------------------------------------------------------


def _log_beta(a):
    """Multivariate Beta through log-gamma; a is (..., M)."""
    return np.sum(gammaln(a), axis=-1) - gammaln(np.sum(a, axis=-1))


def kl_acuteness(pi_row, alpha0):
    """Per-observation KL of the unlabeled assignment block.

    sum_m pi log pi - log[B(alpha0 + pi) / B(alpha0 * 1)], the quantity
    whose curvature in pi flips with alpha0 (small alpha0 rewards
    one-hot rows, large alpha0 rewards uniform rows).
    """
    pi = floor_simplex(np.atleast_2d(pi_row))[0]
    M = pi.shape[0]
    ent = float(np.sum(pi * np.log(pi)))
    return ent - float(_log_beta(alpha0 + pi) - _log_beta(np.full(M, alpha0)))


def vterm_rows(state: VariationalState, ds: Dataset, cfg: ModelConfig, noise):
    """Per-observation contributions to V (length-N array)."""
    pi = state.pi_hat
    sig2 = noise.sigma**2
    log2pis = np.log(2.0 * np.pi * sig2)
    third = 0.5 * np.sum((1.0 - pi) * log2pis[None, :] - np.log(pi), axis=1)
    out = third.copy()
    labeled = ds.labeled_mask
    if np.any(labeled):
        prior = floor_simplex(ds.prior_pi[labeled])
        pl = pi[labeled]
        out[labeled] -= np.sum(pl * (np.log(pl) - np.log(prior)), axis=1)
    if np.any(~labeled):
        pu = pi[~labeled]
        ent = np.sum(pu * np.log(pu), axis=1)
        if cfg.use_dirichlet:
            lb_opt = _log_beta(cfg.alpha0 + pu)
            lb_ref = _log_beta(np.full(cfg.M, cfg.alpha0))
            kl = ent - (lb_opt - lb_ref)
        else:
            kl = ent + np.log(cfg.M)
        out[~labeled] -= kl
    return out


def vterm(state, ds, cfg, noise):
    """The V term of both bounds (KL corrections plus the log-normalizer sum)."""
    return float(np.sum(vterm_rows(state, ds, cfg, noise)))


# ---------------------------------------------------------------------------
# collapsed bound
# ---------------------------------------------------------------------------


def _full_selection(ds: Dataset, M):
    rows = np.arange(ds.n)
    return [rows] * M


def build_cvb_system(ds, cfg, hp, state):
    D = compute_D(state, hp.noise)
    d_blocks = [D.block(m) for m in range(cfg.M)]
    return engine.build_system(ds.X, ds.y, hp, _full_selection(ds, cfg.M), d_blocks)


def gauss_term_cvb(ds, cfg, hp, state):
    """The Gaussian data term of the collapsed bound (no V)."""
    return engine.gauss_loglik(build_cvb_system(ds, cfg, hp, state))


def elbo_cvb(ds, cfg, hp, state):
    """KL-corrected variational bound on the marginal log-likelihood."""
    return gauss_term_cvb(ds, cfg, hp, state) + vterm(state, ds, cfg, hp.noise)


# ---------------------------------------------------------------------------
# fully-labeled sparse likelihood (used by the labeled-only baseline and
# the one-hot limit checks)
# ---------------------------------------------------------------------------


class NoLabeledDataError(ValueError):
    pass


def labeled_selection(ds: Dataset, M):
    if ds.n_labeled == 0:
        raise NoLabeledDataError("no labeled observations")
    return [np.flatnonzero(ds.labels == m + 1) for m in range(M)]


def scmgp_loglik(ds, cfg, hp, labels=None):
    """Exact sparse-model marginal log-likelihood of the labeled rows.

    Each labeled row enters once, under its label, with plain noise
    sigma_m^2; unlabeled rows are ignored.  Passing `labels` overrides
    the dataset's labels (used by relabeling checks).
    """
    if labels is None:
        labels = ds.labels
    else:
        labels = np.asarray(labels, dtype=int).ravel()
    if not np.any(labels > 0):
        raise NoLabeledDataError("no labeled observations")
    rows = [np.flatnonzero(labels == m + 1) for m in range(cfg.M)]
    d_blocks = [np.full(len(r), hp.noise.sigma[m] ** 2) for m, r in enumerate(rows)]
    sys = engine.build_system(ds.X, ds.y, hp, rows, d_blocks)
    return engine.gauss_loglik(sys)


# ---------------------------------------------------------------------------
# exact enumeration oracle
# ---------------------------------------------------------------------------


class OracleTooLargeError(ValueError):
    pass


def assignment_log_weights(ds: Dataset, cfg: ModelConfig):
    """Log prior weight of assigning each row to each output.

    Labeled rows use their prior row; unlabeled rows use the
    Dirichlet-multinomial marginal, which is 1/M for a symmetric prior.
    """
    logw = np.full((ds.n, cfg.M), -np.log(cfg.M))
    labeled = ds.labeled_mask
    if np.any(labeled):
        with np.errstate(divide="ignore"):
            logw[labeled] = np.log(ds.prior_pi[labeled])
    return logw


def exact_marglik_oracle(ds, cfg, hp):
    """Exact marginal log-likelihood by enumerating all M^N assignments.

    Uses the dense covariance (no inducing approximation): for an
    assignment z, the data covariance has entries
    k_ff(x_i, x_j; z_i, z_j) + delta_ij sigma_{z_i}^2, and the mixture is
    combined with a deterministic log-sum-exp.
    """
    total = cfg.M**ds.n
    if total > ORACLE_MAX_ASSIGNMENTS:
        raise OracleTooLargeError(
            "M^N = %d exceeds the enumeration guard (%d)"
            % (total, ORACLE_MAX_ASSIGNMENTS)
        )
    Kpair = kernels.exact_kff_pairs(ds.X, hp)
    logw = assignment_log_weights(ds, cfg)
    sig2 = hp.noise.sigma**2
    per_assignment = _backend.enumerate_mixture(Kpair, sig2, ds.y, logw)
    return float(logsumexp(per_assignment))
