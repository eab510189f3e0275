"""Two-layer network, linear model, gradient descent and checkpoints."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from viper import models
from viper.envs import sample_sphere
from viper.errors import ConfigError, FormatError, NumericError


class TestSymmetricInit:
    @pytest.mark.parametrize("m", [2, 64, 1024])
    def test_zero_output_and_inner_product(self, m):
        p = models.symmetric_init(m, 5, seed=3)
        X = sample_sphere(np.random.default_rng(0), 50, 5)
        np.testing.assert_allclose(models.forward(p, X), 0.0, atol=1e-9)
        np.testing.assert_allclose(models.grad(p, X) @ p.W0.ravel(), 0.0, atol=1e-9)

    def test_pairing(self):
        p = models.symmetric_init(8, 3, seed=0)
        np.testing.assert_array_equal(p.W[:4], p.W[4:])
        np.testing.assert_array_equal(p.b[:4], -p.b[4:])

    def test_covariance(self):
        d = 4
        p = models.symmetric_init(100000, d, seed=1)
        cov = np.cov(p.W[:50000], rowvar=False)
        target = np.eye(d) / d
        assert np.linalg.norm(cov - target) / np.linalg.norm(target) <= 0.05

    def test_odd_width(self):
        with pytest.raises(ConfigError):
            models.symmetric_init(3, 2)


class TestForward:
    def test_paired_cancel(self):
        w = np.array([[0.3, -0.7], [0.3, -0.7]])
        p = models.NetParams(W=w, b=np.array([1.0, -1.0]), W0=w)
        assert models.forward(p, np.array([0.6, 0.8])) == 0.0

    def test_hand_value(self):
        W = np.eye(2)
        p = models.NetParams(W=W, b=np.array([1.0, -1.0]), W0=W)
        assert models.forward(p, np.array([1.0, 0.0])) == pytest.approx(0.70711, abs=1e-5)

    def test_homogeneous(self):
        p = models.symmetric_init(16, 3, seed=0)
        p = p.with_weights(p.W + 0.1 * np.random.default_rng(1).standard_normal(p.W.shape))
        x = sample_sphere(np.random.default_rng(2), 1, 3)[0]
        assert models.forward(p.with_weights(2 * p.W), x) == pytest.approx(2 * models.forward(p, x))

    def test_warns_off_sphere(self):
        p = models.symmetric_init(4, 2, seed=0)
        with pytest.warns(UserWarning):
            models.forward(p, np.array([2.0, 0.0]))


class TestGrad:
    def test_finite_difference(self):
        rng = np.random.default_rng(0)
        p = models.symmetric_init(32, 4, seed=5)
        p = p.with_weights(p.W + 0.2 * rng.standard_normal(p.W.shape))
        eps = 1e-6
        for _ in range(100):
            x = sample_sphere(rng, 1, 4)[0]
            if np.min(np.abs(p.W @ x)) < 1e-3:
                continue
            v = rng.standard_normal(p.W.shape)
            fd = (models.forward(p.with_weights(p.W + eps * v), x)
                  - models.forward(p.with_weights(p.W - eps * v), x)) / (2 * eps)
            an = models.grad(p, x) @ v.ravel()
            assert abs(fd - an) <= 1e-5
            assert abs(fd - an) <= 1e-4 * max(1.0, abs(an))

    def test_inactive_block_zero(self):
        W = np.array([[1.0, 0.0], [-1.0, 0.0]])
        p = models.NetParams(W=W, b=np.array([1.0, -1.0]), W0=W)
        g = models.grad(p, np.array([1.0, 0.0])).reshape(2, 2)
        np.testing.assert_array_equal(g[1], 0.0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 6).map(lambda k: 2 * k), st.integers(1, 6), st.integers(0, 10**6))
    def test_norm_bounded(self, m, d, seed):
        p = models.symmetric_init(m, d, seed=seed)
        x = sample_sphere(np.random.default_rng(seed), 1, d)[0]
        assert np.linalg.norm(models.grad(p, x)) <= 1.0 + 1e-12


class TestLinear:
    def test_zero_and_basis(self):
        assert models.linear_forward(np.zeros(3), np.ones(3)) == 0.0
        assert models.linear_forward(np.array([1.0, 2.0, 3.0]), np.array([0.0, 1.0, 0.0])) == 2.0

    def test_linearization_near_init(self):
        rng = np.random.default_rng(0)
        p = models.symmetric_init(4096, 5, seed=1)
        D = rng.standard_normal(p.W.shape)
        D *= 0.1 / np.linalg.norm(D)
        x = sample_sphere(rng, 20, 5)
        lin = models.init_gradient_features(p, x) @ D.ravel()
        f = models.forward(p.with_weights(p.W + D), x)
        assert np.max(np.abs(f - lin)) <= 1e-3


class TestGradientDescent:
    def test_one_point_ridge(self):
        gd = models.GdConfig(lam=1.0, eta=0.4, J=200)
        res = models.gradient_descent(models.LinearModel(), gd, np.array([[1.0]]), np.array([1.0]), None,
                                      np.zeros(1))
        assert res.params[0] == pytest.approx(0.5, abs=1e-6)

    def test_zero_iterations(self):
        p = models.symmetric_init(6, 2, seed=0)
        gd = models.GdConfig(lam=0.1, eta=0.1, J=0)
        res = models.gradient_descent(models.NetModel(p.b), gd, np.eye(2), np.ones(2), None, p.W0)
        np.testing.assert_array_equal(res.params, p.W0)

    def test_strong_regularization_shrinks(self):
        rng = np.random.default_rng(0)
        X = sample_sphere(rng, 10, 3)
        y = rng.standard_normal(10)
        p = models.symmetric_init(16, 3, seed=0)
        dists = []
        for lam in (1.0, 10.0, 100.0):
            gd = models.GdConfig(lam=lam, eta=models.safe_step_size(X, lam), J=500)
            W = models.gradient_descent(models.NetModel(p.b), gd, X, y, None, p.W0).params
            dists.append(np.linalg.norm(W - p.W0))
        assert dists[0] > dists[1] > dists[2]

    def test_monotone_loss(self):
        rng = np.random.default_rng(1)
        X = rng.standard_normal((15, 4))
        y = rng.standard_normal(15)
        lam = 0.5
        gd = models.GdConfig(lam=lam, eta=models.safe_step_size(X, lam), J=300)
        res = models.gradient_descent(models.LinearModel(), gd, X, y, rng.standard_normal(4), np.zeros(4),
                                      record=True)
        assert np.all(np.diff(res.losses) <= 1e-12)

    def test_perturbed_ridge(self):
        rng = np.random.default_rng(2)
        X, y, z = rng.standard_normal((12, 3)), rng.standard_normal(12), rng.standard_normal(3)
        lam = 0.3
        gd = models.GdConfig(lam=lam, eta=models.safe_step_size(X, lam), J=3000)
        res = models.gradient_descent(models.LinearModel(), gd, X, y, z, np.zeros(3))
        np.testing.assert_allclose(res.params, models.ridge_solution(X, y, lam, z), atol=1e-8)

    def test_divergence(self):
        gd = models.GdConfig(lam=1.0, eta=1e3, J=500)
        with pytest.raises(NumericError) as err:
            models.gradient_descent(models.LinearModel(), gd, np.array([[10.0]]), np.array([1.0]), None,
                                    np.zeros(1))
        assert err.value.iteration is not None

    def test_block_model_matches_dense(self):
        rng = np.random.default_rng(3)
        A, d, n = 4, 3, 30
        S = sample_sphere(rng, n, d)
        acts = rng.integers(0, A, n)
        blocks = models.BlockInputs(S, acts, A)
        X = blocks.dense()
        p = models.symmetric_init(8, A * d, seed=0)
        W = p.W + 0.1 * rng.standard_normal(p.W.shape)
        dense, blk = models.NetModel(p.b), models.BlockNetModel(p.b)
        np.testing.assert_allclose(blk.predict(W, blocks), dense.predict(W, X), atol=1e-12)
        r = rng.standard_normal(n)
        np.testing.assert_allclose(blk.pullback(W, blocks, r), dense.pullback(W, X, r), atol=1e-12)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            models.GdConfig(lam=0.0)
        with pytest.raises(ConfigError):
            models.GdConfig(eta=-1.0)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        p = models.symmetric_init(6, 3, seed=0)
        p = p.with_weights(p.W + 1.5)
        models.save_params(p, tmp_path / "c.bin")
        q = models.load_params(tmp_path / "c.bin")
        np.testing.assert_array_equal(q.W, p.W)
        np.testing.assert_array_equal(q.b, p.b)
        np.testing.assert_array_equal(q.W0, p.W0)

    def test_corrupt(self, tmp_path):
        buf = models.params_to_bytes(models.symmetric_init(2, 2, seed=0))
        with pytest.raises(FormatError):
            models.params_from_bytes(b"XXXX" + buf[4:])
        with pytest.raises(FormatError):
            models.params_from_bytes(buf[:-8])


class TestDeepNet:
    def test_fits_simple_target(self):
        rng = np.random.default_rng(0)
        X = sample_sphere(rng, 200, 3)
        y = X[:, 0] ** 2
        net = models.DeepReluNet(3, width=32, seed=0)
        before = np.mean((net.predict(net.params0, X) - y) ** 2)
        params = net.fit(X, y, lam=0.0, epochs=200, lr=1e-2, batch=32, seed=0)
        assert np.mean((net.predict(params, X) - y) ** 2) < 0.2 * before
