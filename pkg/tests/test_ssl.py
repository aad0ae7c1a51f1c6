import numpy as np
import pytest

from sobolev_ipm.autodiff import Tensor, gradient_norm_sq, grad, param_finite_difference
from sobolev_ipm.gan import critic_loss
from sobolev_ipm.ssl import (
    KPlusOneCritic,
    SSLConfig,
    SSLState,
    blob_dataset,
    critic_eval,
    error_rate,
    ssl_losses,
    train_ce_only,
    train_ssl,
)


def batches(seed=0, n=12):
    rng = np.random.default_rng(seed)
    real = rng.standard_normal((n, 2)) * 2
    fake = rng.standard_normal((n, 2))
    lx = rng.standard_normal((8, 2)) * 2
    ly = np.arange(8) % 4
    return real, fake, lx, ly


class TestCritic:
    def test_decomposition_recomputed(self):
        c = KPlusOneCritic(2, 4, (8,), 6, seed=0)
        x = np.random.default_rng(1).standard_normal((9, 2))
        f, fp, fm, p = critic_eval(c, x)
        phi = np.tanh(x @ c.weights[0].data + c.biases[0].data)
        phi = np.tanh(phi @ c.weights[1].data + c.biases[1].data)
        logits = phi @ c.S.data.T
        q = np.exp(logits - logits.max(axis=1, keepdims=True))
        q /= q.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(p, q, atol=1e-12)
        np.testing.assert_allclose(fp, np.sum(q * logits, axis=1), atol=1e-12)
        np.testing.assert_allclose(fm, phi @ c.v.data, atol=1e-12)
        np.testing.assert_allclose(f, fp - fm, atol=1e-12)

    def test_identical_class_rows(self):
        c = KPlusOneCritic(2, 3, (5,), 4, seed=2)
        c.S.data = np.tile(c.S.data[0], (3, 1))
        c.v.data = np.zeros(4)
        x = np.random.default_rng(3).standard_normal((6, 2))
        f, _, _, _ = critic_eval(c, x)
        phi = c.features(Tensor(x)).data
        np.testing.assert_allclose(f, phi @ c.S.data[0], atol=1e-12)

    def test_zero_features(self):
        c = KPlusOneCritic(2, 4, (5,), 3, seed=4)
        for p in c.weights + c.biases:
            p.data = np.zeros_like(p.data)
        f, _, _, p = critic_eval(c, np.random.default_rng(0).standard_normal((4, 2)))
        np.testing.assert_array_equal(f, 0.0)
        np.testing.assert_allclose(p, 0.25)

    def test_validation(self):
        with pytest.raises(ValueError):
            KPlusOneCritic(2, 1)
        with pytest.raises(ValueError):
            KPlusOneCritic(2, 3, activation="swish")


class TestLosses:
    def test_ce_term_deletion_gives_fisher_loss(self):
        c = KPlusOneCritic(2, 4, (8,), 6, seed=5)
        real, fake, lx, ly = batches(1)
        cfg = SSLConfig(seed=0, formulation="fisher_only", lambda_ce=2.0, rho_f=0.3)
        state = SSLState(lam_f=0.7)
        loss, info = ssl_losses(c, real, fake, lx, ly, cfg, state)
        ref, _ = critic_loss("fisher", c, real, fake, np.vstack([real, fake]), 0.7, 0.3)
        assert float(loss.data) + 2.0 * info["CE"] == pytest.approx(float(ref.data), abs=1e-12)

    @pytest.mark.parametrize("which", ["lam_f", "lam_s"])
    def test_multiplier_enters_linearly(self, which):
        # d loss / d lambda = 1 - Omega, so the term vanishes when Omega = 1
        c = KPlusOneCritic(2, 4, (8,), 6, seed=6)
        real, fake, lx, ly = batches(2)
        cfg = SSLConfig(seed=0)
        l0, info = ssl_losses(c, real, fake, lx, ly, cfg, SSLState())
        l1, _ = ssl_losses(c, real, fake, lx, ly, cfg, SSLState(**{which: 1.5}))
        om = info["Omega_F" if which == "lam_f" else "Omega_S"]
        assert float(l1.data) - float(l0.data) == pytest.approx(1.5 * (1 - om), abs=1e-12)

    @pytest.mark.parametrize("formulation", ["fisher_only", "fisher_plus_sobolev"])
    def test_gradient_finite_difference(self, formulation):
        c = KPlusOneCritic(2, 4, (8,), 8, seed=7)
        real, fake, lx, ly = batches(3)
        cfg = SSLConfig(seed=0, formulation=formulation, rho_f=0.2, rho_s=0.3)
        state = SSLState(0.4, -0.2)
        loss_fn = lambda: ssl_losses(c, real, fake, lx, ly, cfg, state)[0]
        analytic = np.concatenate([g.data.ravel() for g in grad(loss_fn(), c.parameters())])
        numeric = param_finite_difference(c, loss_fn)
        assert np.max(np.abs(analytic - numeric)) / np.max(np.abs(numeric)) <= 1e-4

    def test_single_class_rejected(self):
        c = KPlusOneCritic(2, 4, seed=0)
        real, fake, lx, _ = batches()
        with pytest.raises(ValueError):
            ssl_losses(c, real, fake, lx, np.zeros(len(lx), dtype=int), SSLConfig(seed=0), SSLState())

    def test_relu_rejected_for_sobolev(self):
        c = KPlusOneCritic(2, 4, activation="relu", seed=0)
        real, fake, lx, ly = batches()
        with pytest.raises(ValueError):
            ssl_losses(c, real, fake, lx, ly, SSLConfig(seed=0), SSLState())
        ssl_losses(c, real, fake, lx, ly, SSLConfig(seed=0, formulation="fisher_only"), SSLState())

    def test_minus_scale_law(self):
        c = KPlusOneCritic(2, 4, (8,), 6, seed=8)
        x = np.random.default_rng(9).standard_normal((10, 2))
        om = float(gradient_norm_sq(c.minus(), x).mean().data)
        c.v.data = 3.0 * c.v.data
        assert om >= 0
        assert float(gradient_norm_sq(c.minus(), x).mean().data) == pytest.approx(9.0 * om, rel=1e-12)

    @pytest.mark.parametrize("kw", [dict(formulation="sobolev_only"), dict(lambda_ce=0.0), dict(rho_s=0.0)])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            SSLConfig(seed=0, **kw)


class TestData:
    def test_blobs_balanced_labels(self):
        d = blob_dataset(SSLConfig(seed=0), np.random.default_rng(0))
        assert np.bincount(d.labeled_y).tolist() == [5, 5, 5, 5]
        assert d.unlabeled_x.shape == (2000, 2) and d.test_x.shape == (2000, 2)
        np.testing.assert_allclose(np.linalg.norm(d.centers, axis=1), 3.0)

    def test_error_rate_of_center_classifier(self):
        d = blob_dataset(SSLConfig(seed=1), np.random.default_rng(1))
        c = KPlusOneCritic(2, 4, seed=0)
        assert 0.0 <= error_rate(c, d.test_x, d.test_y) <= 1.0


class TestTraining:
    def test_large_ce_weight_fits_labels(self):
        cfg = SSLConfig(seed=0, lambda_ce=100.0, steps=2000)
        res = train_ssl(cfg)
        d = blob_dataset(cfg, np.random.default_rng(0))
        assert error_rate(res["critic"], d.labeled_x, d.labeled_y) == 0.0

    def test_all_labeled_matches_ce(self):
        cfg = SSLConfig(seed=3, n_labeled=2000, labeled_batch=64, steps=1000)
        ssl = train_ssl(cfg)["final_test_error"]
        ce = train_ce_only(cfg)["final_test_error"]
        assert abs(ssl - ce) <= 0.02

    def test_deterministic(self):
        cfg = SSLConfig(seed=4, steps=30)
        a, b = train_ssl(cfg), train_ssl(cfg)
        assert a["test_error"] == b["test_error"] and a["CE"] == b["CE"]
