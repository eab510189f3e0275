"""VIPeR learners, baselines, policies and policy files."""

import numpy as np
import pytest

from viper import algorithms as alg
from viper import envs, models
from viper.errors import ConfigError
from viper.offline_data import OfflineDataset, collect_bandit_data, collect_mdp_data


class TableFeatures:
    """Features looked up from an (S, A, d) table."""

    def __init__(self, table):
        self.table = np.asarray(table, dtype=float)
        self.n_actions = self.table.shape[1]
        self.dim = self.table.shape[2]

    def __call__(self, states):
        return self.table[np.asarray(states, dtype=np.int64)]


def _dataset(states, actions, rewards, next_states=None):
    states = np.atleast_2d(np.asarray(states, dtype=np.int64))
    actions = np.atleast_2d(np.asarray(actions, dtype=np.int64))
    rewards = np.atleast_2d(np.asarray(rewards, dtype=float))
    if next_states is None:
        next_states = np.zeros_like(states)
    return OfflineDataset("linear-mdp", states, actions, rewards, np.atleast_2d(next_states))


def _one_point():
    """One state, one action, feature 1, reward 1."""
    return _dataset([[0]], [[0]], [[1.0]]), TableFeatures([[[1.0]]])


@pytest.fixture(scope="module")
def mdp():
    spec = envs.make_hard_linear_mdp(3, seed=0)
    return spec, envs.MdpFeatures(spec), collect_mdp_data(spec, 60, seed=0)


@pytest.fixture(scope="module")
def bandit():
    task = envs.make_bandit_task("cos", dim=4, n_actions=3, seed=0)
    return task, envs.BanditFeatures(task), collect_bandit_data(task, 40, seed=0)


class TestPerturbTargets:
    def test_zero_sigma(self):
        r, v = np.array([1.0, 2.0]), np.array([0.5, 0.0])
        np.testing.assert_array_equal(alg.perturb_targets(r, v, 0.0, np.random.default_rng(0)), r + v)

    def test_variance(self):
        sigma = 0.8
        y = alg.perturb_targets(np.zeros(200000), np.zeros(200000), sigma, np.random.default_rng(1))
        assert abs(y.var() / sigma**2 - 1.0) <= 0.02
        assert abs(y.mean()) <= 4 * sigma / np.sqrt(200000)


class TestLinViperSolve:
    def test_one_point(self):
        th = alg.lin_viper_solve(np.array([[1.0]]), np.array([1.0]), 1.0, 0.0, np.random.default_rng(0))
        assert th.theta[0] == pytest.approx(0.5, abs=1e-12)

    def test_shift_cancels_data(self):
        # xi = 0 and zeta = e1: theta = Lambda^{-1}[X^T y - lam e1] = 0 for x = e1, y = 1, lam = 1
        class FixedDraws:
            def standard_normal(self, size):
                return np.zeros(size) if size == 1 else np.eye(size)[0]

        th = alg.lin_viper_solve(np.array([[1.0, 0.0]]), np.array([1.0]), 1.0, 1.0, FixedDraws())
        np.testing.assert_allclose(th.theta, [0.0, 0.0], atol=1e-15)

    def test_matches_gd(self):
        rng = np.random.default_rng(3)
        X, y = rng.standard_normal((15, 3)), rng.standard_normal(15)
        lam, sigma = 0.5, 0.7
        closed = alg.lin_viper_solve(X, y, lam, sigma, np.random.default_rng(9)).theta
        r = np.random.default_rng(9)
        yt = y + sigma * r.standard_normal(15)
        zeta = sigma * r.standard_normal(3)
        gd = models.GdConfig(lam, models.safe_step_size(X, lam), 4000)
        W = models.gradient_descent(models.LinearModel(), gd, X, yt, zeta, np.zeros(3)).params
        np.testing.assert_allclose(W, closed, atol=1e-8)


class TestReductions:
    def test_zero_sigma_single_member_is_greedy(self, mdp):
        spec, feat, ds = mdp
        _, vip = alg.viper_fit(ds, feat, "linear", alg.ViperConfig(M=1, sigma=0.0, lam=0.01))
        greedy = alg.lingreedy_fit(ds, feat, lam=0.01)
        states = np.arange(2)
        for h in range(1, 4):
            np.testing.assert_allclose(vip.q_values(h, states), greedy.q_values(h, states), atol=1e-10)

    def test_neuralcb_zero_beta_is_greedy(self, bandit):
        task, feat, ds = bandit
        net = alg.NetConfig(width=16, J=50)
        a = alg.neuralcb_fit(ds, feat, net, beta=0.0)
        b = alg.neuralgreedy_fit(ds, feat, net)
        states = envs.sample_bandit_states(task, 20, np.random.default_rng(0))
        np.testing.assert_allclose(a.q_values(1, states), b.q_values(1, states), atol=1e-12)

    def test_d1_fixture(self):
        ds, feat = _one_point()
        _, pol = alg.viper_fit(ds, feat, "linear", alg.ViperConfig(M=1, sigma=0.0, lam=1.0))
        assert pol.q_values(1, [0])[0, 0] == pytest.approx(min(0.5, 1.0))

    def test_zero_iterations_gives_zero(self, bandit):
        task, feat, ds = bandit
        _, pol = alg.viper_fit(ds, feat, "neural", alg.ViperConfig(M=3, sigma=1.0, J=0, width=8))
        states = envs.sample_bandit_states(task, 10, np.random.default_rng(0))
        np.testing.assert_allclose(pol.q_values(1, states), 0.0, atol=1e-12)


class TestTruncation:
    @pytest.mark.parametrize("family", ["linear", "neural"])
    def test_bounds(self, mdp, family):
        spec, feat, ds = mdp
        cfg = alg.ViperConfig(M=4, sigma=2.0, psi=0.5, J=100, width=8)
        _, pol = alg.viper_fit(ds, feat, family, cfg)
        for h in range(1, 4):
            q = pol.q_values(h, np.arange(2))
            assert q.min() >= 0.0
            assert q.max() <= (3 - h + 1) * 1.5 + 1e-12

    def test_baseline_caps(self, mdp):
        spec, feat, ds = mdp
        # huge rewards push the fit above the cap
        big = OfflineDataset(ds.kind, ds.states, ds.actions, ds.rewards * 100, ds.next_states)
        for pol in (alg.linlcb_fit(big, feat, beta=0.1), alg.lingreedy_fit(big, feat)):
            for h in range(1, 4):
                q = pol.q_values(h, np.arange(2))
                assert q.min() >= 0.0 and q.max() <= 3 - h + 1


class TestPessimism:
    def test_adding_members_never_raises(self, mdp):
        spec, feat, ds = mdp
        ens, _ = alg.viper_fit(ds, feat, "linear", alg.ViperConfig(M=2, sigma=1.0))
        step = ens.steps[0]
        phi = feat(np.arange(2))
        before = step(phi)
        rng = np.random.default_rng(0)
        for _ in range(10):
            step = step.add_member(step.thetas[0] + rng.standard_normal(step.thetas.shape[1]))
            after = step(phi)
            assert np.all(after <= before + 1e-15)
            before = after

    def test_neural_add_member(self, bandit):
        task, feat, ds = bandit
        ens, _ = alg.viper_fit(ds, feat, "neural", alg.ViperConfig(M=2, sigma=1.0, J=30, width=8))
        step = ens.steps[0]
        x = feat(envs.sample_bandit_states(task, 5, np.random.default_rng(1)))
        bigger = step.add_member(step.Ws[0] + 0.5)
        assert np.all(bigger(x) <= step(x) + 1e-15)

    def test_lcb_bonus(self):
        # no data in the probed direction: the bonus is beta * ||phi|| / sqrt(lam) with lam = 1
        ds = _dataset([[0]], [[0]], [[0.0]])
        feat = TableFeatures([[[1.0, 0.0], [0.0, 1.0]]])
        pol = alg.linlcb_fit(ds, feat, beta=0.3, lam=1.0)
        step = pol.steps[0]
        raw = step.raw(feat([0]))[0]
        assert raw[1] == pytest.approx(-0.3, abs=1e-12)
        assert abs(raw[0]) < 0.3


class TestBackwardConsistency:
    def test_targets_use_next_step(self):
        # two steps; step 2 pays 1, step 1 pays 0: Q_1 should learn V_2
        ds = _dataset(np.zeros((50, 2)), np.zeros((50, 2)), np.tile([0.0, 1.0], (50, 1)))
        feat = TableFeatures([[[1.0]]])
        _, pol = alg.viper_fit(ds, feat, "linear", alg.ViperConfig(M=1, sigma=0.0, lam=1e-6))
        assert pol.q_values(2, [0])[0, 0] == pytest.approx(1.0, abs=1e-6)
        assert pol.q_values(1, [0])[0, 0] == pytest.approx(1.0, abs=1e-6)

    def test_greedy_ties_lowest(self):
        ds = _dataset([[0]], [[0]], [[0.0]])
        feat = TableFeatures([[[0.0], [0.0], [0.0]]])
        pol = alg.lingreedy_fit(ds, feat)
        assert pol.act_one(1, 0) == 0


class TestDiagonalMode:
    def test_axis_aligned_agrees(self):
        # one-hot gradients: full and diagonal covariance coincide
        acc_f = alg.CovarianceAccumulator(3, 0.5, mode="full")
        acc_d = alg.CovarianceAccumulator(3, 0.5, mode="diagonal")
        for g in np.eye(3)[[0, 1, 1, 2, 0]] * np.array([[1.0], [2.0], [0.5], [3.0], [1.5]]):
            acc_f.update(g)
            acc_d.update(g)
        for v in np.random.default_rng(0).standard_normal((10, 3)):
            assert acc_f.quad_form(v) == pytest.approx(acc_d.quad_form(v), abs=1e-12)

    def test_modes_run(self, bandit):
        task, feat, ds = bandit
        net = alg.NetConfig(width=8, J=30)
        states = envs.sample_bandit_states(task, 10, np.random.default_rng(0))
        full = alg.neuralcb_fit(ds, feat, net, beta=0.1, mode="full")
        diag = alg.neuralcb_fit(ds, feat, net, beta=0.1, mode="diag")
        assert full.q_values(1, states).shape == diag.q_values(1, states).shape == (10, 3)


class TestDeterminism:
    def test_workers_identical(self, bandit):
        task, feat, ds = bandit
        states = envs.sample_bandit_states(task, 10, np.random.default_rng(0))
        vals = []
        for workers in (1, 2):
            cfg = alg.ViperConfig(M=4, sigma=0.5, J=40, width=8, seed=3, workers=workers)
            ens, pol = alg.viper_fit(ds, feat, "neural", cfg)
            vals.append((ens.steps[0].Ws.copy(), pol.q_values(1, states)))
        np.testing.assert_array_equal(vals[0][0], vals[1][0])
        np.testing.assert_array_equal(vals[0][1], vals[1][1])

    def test_seed_changes_draws(self, mdp):
        spec, feat, ds = mdp
        a, _ = alg.viper_fit(ds, feat, "linear", alg.ViperConfig(M=2, sigma=1.0, seed=0))
        b, _ = alg.viper_fit(ds, feat, "linear", alg.ViperConfig(M=2, sigma=1.0, seed=1))
        assert not np.array_equal(a.steps[0].thetas, b.steps[0].thetas)

    def test_block_path_matches_dense(self, bandit):
        task, feat, ds = bandit
        _, pol = alg.viper_fit(ds, feat, "neural", alg.ViperConfig(M=3, sigma=1.0, J=20, width=8))
        states = envs.sample_bandit_states(task, 7, np.random.default_rng(2))
        dense = pol.steps[0](feat(states))
        np.testing.assert_allclose(pol.q_values(1, states), dense, atol=1e-12)


class TestConfig:
    def test_rejects(self):
        with pytest.raises(ConfigError):
            alg.ViperConfig(M=0)
        with pytest.raises(ConfigError):
            alg.ViperConfig(sigma=-1.0)
        with pytest.raises(ConfigError):
            alg.ViperConfig(lam=0.0)
        with pytest.raises(ConfigError):
            alg.linlcb_fit(None, None, beta=-1.0)

    def test_sigma_schedule(self):
        cfg = alg.ViperConfig(sigma=[0.1, 0.2, 0.3])
        assert cfg.sigma_at(2, 3) == 0.2
        with pytest.raises(ConfigError):
            cfg.sigma_at(1, 4)


class TestPolicyFiles:
    @pytest.mark.parametrize("kind", ["lin-viper", "neural-viper", "linlcb", "neuralcb"])
    def test_round_trip(self, tmp_path, bandit, kind):
        task, feat, ds = bandit
        net = alg.NetConfig(width=8, J=20)
        if kind == "lin-viper":
            pol = alg.viper_fit(ds, feat, "linear", alg.ViperConfig(M=3))[1]
        elif kind == "neural-viper":
            pol = alg.viper_fit(ds, feat, "neural", alg.ViperConfig(M=3, J=20, width=8))[1]
        elif kind == "linlcb":
            pol = alg.linlcb_fit(ds, feat, beta=0.5)
        else:
            pol = alg.neuralcb_fit(ds, feat, net, beta=0.5)
        path = tmp_path / "p.npz"
        alg.save_policy(pol, path)
        back = alg.load_policy(path)
        states = envs.sample_bandit_states(task, 8, np.random.default_rng(0))
        np.testing.assert_array_equal(back.q_values(1, states), pol.q_values(1, states))
        assert back.tag == pol.tag
        assert alg.policy_action(path, 1, states[0]) == pol.act_one(1, states[0])

    def test_mdp_round_trip(self, tmp_path, mdp):
        spec, feat, ds = mdp
        pol = alg.linlcb_fit(ds, feat, beta=1.0)
        alg.save_policy(pol, tmp_path / "m.npz")
        np.testing.assert_array_equal(alg.load_policy(tmp_path / "m.npz").table(), pol.table())
