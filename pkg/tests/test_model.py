"""Dataset validation and variational-state initialization."""

import numpy as np
import pytest

from wsmgp.model import (
    EPS_PI,
    Dataset,
    DatasetError,
    ModelConfig,
    floor_simplex,
    init_state,
    make_dataset,
    refresh_alpha_hat,
    set_pi_hat,
    validate_dataset,
)


def small_ds(labels=(1, 2, 0, 0), M=2):
    n = len(labels)
    rng = np.random.default_rng(0)
    return make_dataset(rng.normal(size=(n, 1)), rng.normal(size=n),
                        labels=np.array(labels), n_outputs=M)


class TestValidation:
    def test_well_formed_passes(self):
        ds = small_ds((1, 2, 1, 2))
        validate_dataset(ds, ModelConfig(M=2, Q=3))

    def test_bad_simplex_row(self):
        ds = small_ds((1, 2, 0, 0))
        ds.prior_pi[0] = [0.6, 0.5]
        with pytest.raises(DatasetError, match="simplex"):
            validate_dataset(ds, ModelConfig(M=2, Q=3))

    def test_label_out_of_range(self):
        ds = small_ds((1, 3, 0, 0), M=3)
        with pytest.raises(DatasetError, match="out of range"):
            validate_dataset(ds, ModelConfig(M=2, Q=3))

    def test_nan_input_rejected(self):
        ds = small_ds()
        ds.X[1, 0] = np.nan
        with pytest.raises(DatasetError, match="non-finite"):
            validate_dataset(ds, ModelConfig(M=2, Q=3))


class TestFloor:
    def test_untouched_when_above_floor(self):
        rows = np.array([[0.4, 0.6]])
        out = floor_simplex(rows)
        assert out is rows

    def test_hard_row_floored(self):
        out = floor_simplex(np.array([[1.0, 0.0]]))
        assert out[0, 1] >= EPS_PI * 0.5
        assert out[0].sum() == pytest.approx(1.0, abs=1e-12)


class TestInitState:
    def test_deterministic(self):
        ds = small_ds()
        cfg = ModelConfig(M=2, Q=3)
        a = init_state(ds, cfg, seed=7)
        b = init_state(ds, cfg, seed=7)
        np.testing.assert_array_equal(a.pi_hat, b.pi_hat)

    def test_labeled_rows_start_at_prior(self):
        ds = small_ds((1, 2, 0, 0))
        st = init_state(ds, ModelConfig(M=2, Q=3), seed=0)
        # hard one-hot prior is floored
        assert st.pi_hat[0, 0] == pytest.approx(1.0, abs=1e-9)
        assert st.pi_hat[0, 1] >= EPS_PI * 0.5

    def test_unlabeled_rows_near_uniform(self):
        ds = small_ds()
        st = init_state(ds, ModelConfig(M=2, Q=3), seed=1)
        assert np.all(np.abs(st.pi_hat[2:] - 0.5) <= 0.05)

    def test_alpha_hat_analytic(self):
        ds = small_ds()
        cfg = ModelConfig(M=2, Q=3, alpha0=0.7)
        st = init_state(ds, cfg, seed=2)
        np.testing.assert_allclose(st.alpha_hat, 0.7 + st.pi_hat[2:], atol=1e-15)

    def test_su_copies_kuu(self):
        ds = small_ds()
        kuu = np.array([[2.0, 0.1], [0.1, 1.0]])
        st = init_state(ds, ModelConfig(M=2, Q=2), seed=0, kuu=kuu)
        np.testing.assert_array_equal(st.Su, kuu)
        st.Su[0, 0] = 5.0
        assert kuu[0, 0] == 2.0  # a copy, not a view
        assert np.all(st.mu_u == 0.0)

    def test_set_pi_hat_keeps_alpha_analytic(self):
        ds = small_ds()
        cfg = ModelConfig(M=2, Q=3, alpha0=0.4)
        st = init_state(ds, cfg, seed=3)
        new = np.array([[0.9, 0.1]] * 4)
        set_pi_hat(st, ds, cfg.alpha0, new)
        np.testing.assert_allclose(st.alpha_hat, 0.4 + st.pi_hat[2:])
        assert np.all(st.pi_hat >= EPS_PI * 0.5)
