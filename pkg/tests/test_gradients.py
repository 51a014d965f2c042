"""Finite-difference verification of every analytic gradient path."""

import itertools

import numpy as np
import pytest

from wsmgp import checks, gradients
from wsmgp.bounds import scmgp_loglik
from wsmgp.gradients import finite_diff_check
from wsmgp.kernels import (
    HyperParams,
    InducingInputs,
    LatentKernelParams,
    NoiseParams,
    OutputKernelParams,
)
from wsmgp.model import make_dataset, ModelConfig, refresh_alpha_hat
from wsmgp.trainer import _state_with


class TestHarness:
    def test_quadratic_exact(self):
        f = lambda x: float(x @ x)
        rep = finite_diff_check(f, np.array([2.0, 4.0]), np.array([1.0, 2.0]))
        assert rep.max_rel_error < 1e-9

    def test_corrupted_gradient_flagged(self):
        f = lambda x: float(x @ x)
        g = np.array([2.0, 4.0])
        g[1] *= 1.01
        rep = finite_diff_check(f, g, np.array([1.0, 2.0]))
        assert rep.max_rel_error > 1e-3
        assert rep.worst[0] == "1"

    def test_step_sweep_v_curve(self):
        # classic V-shape: error decreases then rises again as h shrinks
        ds, cfg, hp, state = checks.random_instance(0, n=6, M=2, Q=3)
        x0, value, grad, _ = checks.packed_cvb(ds, cfg, hp, state)
        errs = [
            finite_diff_check(value, grad, x0, h=h).max_rel_error
            for h in (1e-3, 1e-5, 1e-9)
        ]
        assert errs[1] < errs[0]
        assert errs[1] < errs[2]


class TestGradCvb:
    @pytest.mark.parametrize("seed", range(5))
    def test_finite_difference_match(self, seed):
        rep = checks.gradcheck_cvb(seed)
        assert rep.max_rel_error < 1e-4, str(rep)

    def test_single_output_sigma_gradient(self):
        # M=1, pi frozen at one: the sigma gradient equals the plain sparse
        # GP likelihood gradient, checked by finite differences on the
        # fully-labeled evaluation
        ds, cfg, hp, state = checks.random_instance(3, n=8, M=1, Q=3,
                                                    labeled_frac=1.0)
        ds = make_dataset(ds.X, ds.y, labels=np.ones(ds.n, dtype=int), n_outputs=1)
        _, bundle = gradients.scmgp_loglik_with_grad(ds, cfg, hp)
        h = 1e-6
        def at_sigma(s):
            hp_s = HyperParams(latent=hp.latent, outputs=hp.outputs,
                               noise=NoiseParams(sigma=np.array([s])),
                               inducing=hp.inducing)
            return scmgp_loglik(ds, cfg, hp_s)
        s0 = hp.noise.sigma[0]
        fd = (at_sigma(s0 * np.exp(h)) - at_sigma(s0 * np.exp(-h))) / (2 * h)
        assert bundle.d_sigma[0] == pytest.approx(fd, rel=1e-5)

    def test_zero_amplitude_structure(self):
        ds, cfg, hp, state = checks.random_instance(4, n=8, M=2, Q=3)
        outs = [OutputKernelParams(S=0.0, Lm=hp.outputs[0].Lm), hp.outputs[1]]
        hp0 = HyperParams(latent=hp.latent, outputs=outs, noise=hp.noise,
                          inducing=hp.inducing)
        _, bundle = gradients.elbo_cvb_with_grad(ds, cfg, hp0, state)
        assert np.all(bundle.d_Lm[0] == 0.0)
        assert np.isfinite(bundle.d_S[0]) and bundle.d_S[0] != 0.0

    def test_floor_invariance_away_from_floor(self):
        ds, cfg, hp, state = checks.random_instance(5, n=6, M=2, Q=3)
        assert state.pi_hat.min() > 10 * 1e-10
        _, b1 = gradients.elbo_cvb_with_grad(ds, cfg, hp, state)
        from wsmgp.model import floor_simplex

        state.pi_hat = floor_simplex(state.pi_hat)
        _, b2 = gradients.elbo_cvb_with_grad(ds, cfg, hp, state)
        np.testing.assert_array_equal(b1.d_pi_logits, b2.d_pi_logits)

    def test_one_hot_sweep_matches_scmgp_gradient(self):
        ds, cfg, hp, _ = checks.random_instance(6, n=8, M=2, Q=4)
        rng = np.random.default_rng(6)
        assign = rng.integers(1, 3, size=ds.n)
        ds_lab = make_dataset(ds.X, ds.y, labels=assign, n_outputs=2)
        _, ref = gradients.scmgp_loglik_with_grad(ds_lab, cfg, hp)
        prev = np.inf
        for eps in (1e-4, 1e-6, 1e-8):
            pi = np.full((ds.n, 2), eps)
            pi[np.arange(ds.n), assign - 1] = 1 - eps
            ds_onehot = make_dataset(ds.X, ds.y, labels=assign, n_outputs=2)
            # align priors to the softened one-hot so the labeled KL is zero
            st = _state_with(ds_onehot, cfg, cfg.alpha0, pi)
            _, b = gradients.elbo_cvb_with_grad(ds_onehot, cfg, hp, st)
            diff = max(
                np.max(np.abs(b.d_S - ref.d_S)),
                np.max(np.abs(b.d_Lm - ref.d_Lm)),
                np.max(np.abs(b.d_L - ref.d_L)),
            )
            assert diff < prev
            prev = diff
        assert prev < 1e-3


class TestGradSvb:
    @pytest.mark.parametrize("seed", range(5))
    def test_finite_difference_match(self, seed):
        rep = checks.gradcheck_svb(seed)
        assert rep.max_rel_error < 1e-4, str(rep)

    def test_minibatch_finite_difference_match(self):
        rep = checks.gradcheck_svb(11, batch=[0, 3, 7])
        assert rep.max_rel_error < 1e-4, str(rep)

    def test_prior_q_mu_gradient_form(self):
        # q(u) = prior, mu_u = 0: dMuU = sum_m Phi' a_m exactly
        ds, cfg, hp, state = checks.random_instance(7, n=6, M=2, Q=3)
        from scipy.linalg import cho_solve
        from wsmgp import kernels, svi

        kuu, cho = svi._jittered_kuu(hp)
        state.mu_u = np.zeros(3)
        state.Su = kuu.copy()
        _, bundle = gradients.elbo_svb_with_grad(ds, cfg, hp, state)
        expect = np.zeros(3)
        for m, out in enumerate(hp.outputs):
            kfu = kernels.kfu_matrix(ds.X, hp.inducing.W, out, hp.latent)
            phi = cho_solve(cho, kfu.T).T
            mu = phi @ state.mu_u
            a = state.pi_hat[:, m] / hp.noise.sigma[m] ** 2 * (ds.y - mu)
            expect += phi.T @ a
        np.testing.assert_allclose(bundle.d_mu_u, expect, rtol=1e-10)

    def test_batch_average_equals_full_gradient(self):
        ds, cfg, hp, state = checks.random_instance(8, n=6, M=2, Q=3)
        rng = np.random.default_rng(8)
        A = rng.normal(size=(3, 3))
        state.Su = np.eye(3) + A @ A.T / 3
        state.mu_u = rng.normal(size=3)
        x0, _, grad, _ = checks.packed_svb(ds, cfg, hp, state)
        full = grad(x0)
        batch_grads = []
        for b in itertools.combinations(range(6), 3):
            _, _, gb, _ = checks.packed_svb(ds, cfg, hp, state, batch=np.array(b))
            batch_grads.append(gb(x0))
        np.testing.assert_allclose(np.mean(batch_grads, axis=0), full, atol=1e-8)


class TestGradVterm:
    @pytest.mark.parametrize("seed", range(5))
    def test_finite_difference_match(self, seed):
        rep = checks.gradcheck_vterm(seed)
        assert rep.max_rel_error < 1e-6, str(rep)

    def test_labeled_kl_annihilated_at_prior(self):
        # when pi equals the labeled prior, the labeled-KL piece contributes
        # a row-constant gradient that the softmax chain removes
        pi = np.array([[0.6, 0.4]])
        prior = pi.copy()
        raw = -(np.log(pi) - np.log(prior) + 1.0)  # = -1 everywhere
        chained = gradients.softmax_chain(pi, raw)
        np.testing.assert_allclose(chained, 0.0, atol=1e-14)

    def test_alpha0_gradient_at_uniform_rows(self):
        ds, cfg, hp, state = checks.random_instance(9, n=6, M=2, Q=3,
                                                    labeled_frac=0.0)
        state.pi_hat = np.full((6, 2), 0.5)
        refresh_alpha_hat(state, ds, cfg.alpha0)
        rep = checks.gradcheck_vterm(9)
        assert rep.max_rel_error < 1e-6
