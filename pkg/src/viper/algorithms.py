"""Offline learners: VIPeR (neural and linear) and the LCB/greedy baselines.

Every learner runs backward over steps ``h = H..1`` and returns a
:class:`Policy` that is greedy (lowest action id on ties) with respect to a
truncated step value function.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import envs, models
from .errors import ConfigError, DomainError, NumericError
from .uq import CovarianceAccumulator

# --- step value functions ----------------------------------------------------


class LinearEnsembleQ:
    """min over members of <phi, theta_i>, clipped to [0, cap]."""

    family = "linear"

    def __init__(self, thetas, cap):
        self.thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        self.cap = float(cap)

    @property
    def n_members(self):
        return self.thetas.shape[0]

    def member_values(self, feats):
        return np.moveaxis(feats @ self.thetas.T, -1, 0)

    def raw(self, feats):
        return self.member_values(feats).min(axis=0)

    def __call__(self, feats):
        return np.clip(self.raw(feats), 0.0, self.cap)

    def add_member(self, theta):
        return LinearEnsembleQ(np.vstack([self.thetas, theta]), self.cap)

    def arrays(self):
        return {"thetas": self.thetas}


class NetEnsembleQ:
    """min over members of f(x; W_i), clipped to [0, cap]."""

    family = "neural"

    def __init__(self, Ws, b, cap):
        self.Ws = np.asarray(Ws, dtype=float)
        if self.Ws.ndim == 2:
            self.Ws = self.Ws[None]
        self.b = np.asarray(b, dtype=float)
        self.cap = float(cap)
        M, m, p = self.Ws.shape
        self._stacked = self.Ws.reshape(M * m, p)
        self._blocks = None

    @property
    def n_members(self):
        return self.Ws.shape[0]

    def member_values(self, feats):
        M, m, _ = self.Ws.shape
        lead = feats.shape[:-1]
        X = feats.reshape(-1, feats.shape[-1])
        hid = np.maximum(X @ self._stacked.T, 0.0).reshape(-1, M, m)
        vals = hid @ self.b / np.sqrt(m)
        return vals.T.reshape((M,) + lead)

    def raw(self, feats):
        return self.member_values(feats).min(axis=0)

    def __call__(self, feats):
        return np.clip(self.raw(feats), 0.0, self.cap)

    def block_values(self, states, n_actions):
        """Clipped values for block-embedded inputs given the (n, d) states;
        the zero blocks of the embedding are skipped."""
        M, m, p = self.Ws.shape
        d = p // n_actions
        if self._blocks is None:
            self._blocks = np.ascontiguousarray(self.Ws.reshape(M * m * n_actions, d).T)
        hid = (states @ self._blocks).reshape(states.shape[0], M, m, n_actions)
        np.maximum(hid, 0.0, out=hid)
        vals = (self.b @ hid) / np.sqrt(m)
        return np.clip(vals.min(axis=1), 0.0, self.cap)

    def add_member(self, W):
        return NetEnsembleQ(np.concatenate([self.Ws, np.asarray(W)[None]]), self.b, self.cap)

    def arrays(self):
        return {"Ws": self.Ws, "b": self.b}


def _acc_arrays(acc):
    out = {"acc_lam": np.array(acc.lam), "acc_dim": np.array(acc.dim)}
    if acc.mode == "diagonal":
        out["acc_diag"] = acc.diagonal()
    elif acc.mode == "full":
        out["acc_mat"] = acc.matrix()
    else:
        out["acc_rows"] = acc._rows
    return out


def _acc_from_arrays(a, mode):
    acc = CovarianceAccumulator(int(a["acc_dim"]), float(a["acc_lam"]), mode=mode)
    if mode == "diagonal":
        acc._diag = np.array(a["acc_diag"], dtype=float)
    elif mode == "full":
        acc._mat = np.array(a["acc_mat"], dtype=float)
        acc._refactor()
    else:
        acc.update_many(a["acc_rows"])
    return acc


class LinearLcbQ:
    """<phi, theta> - beta ||phi||_{Lambda^{-1}}, clipped to [0, cap]."""

    family = "linear-lcb"

    def __init__(self, theta, acc, beta, cap):
        self.theta = np.asarray(theta, dtype=float)
        self.acc = acc
        self.beta = float(beta)
        self.cap = float(cap)

    def raw(self, feats):
        val = feats @ self.theta
        if self.beta == 0:
            return val
        flat = feats.reshape(-1, feats.shape[-1])
        return val - self.beta * self.acc.quad_form(flat).reshape(val.shape)

    def __call__(self, feats):
        return np.clip(self.raw(feats), 0.0, self.cap)

    def arrays(self):
        return {"theta": self.theta, "beta": np.array(self.beta), **_acc_arrays(self.acc)}


class NetLcbQ:
    """f(x; W) - beta ||g(x; W)||_{Lambda^{-1}}, clipped to [0, cap]."""

    family = "neural-lcb"

    def __init__(self, params, acc, beta, cap, grad_at="trained"):
        self.params = params
        self.acc = acc
        self.beta = float(beta)
        self.cap = float(cap)
        self.grad_at = grad_at

    def raw(self, feats):
        flat = feats.reshape(-1, feats.shape[-1])
        val = models.net_forward(self.params.W, self.params.b, flat)
        if self.beta != 0:
            gp = self.params if self.grad_at == "trained" else self.params.with_weights(self.params.W0)
            val = val - self.beta * self.acc.quad_form(models.grad(gp, flat))
        return val.reshape(feats.shape[:-1])

    def __call__(self, feats):
        return np.clip(self.raw(feats), 0.0, self.cap)

    def arrays(self):
        return {"W": self.params.W, "b": self.params.b, "W0": self.params.W0,
                "beta": np.array(self.beta), **_acc_arrays(self.acc)}


# --- policies ------------------------------------------------------------------


class Policy:
    """Step-indexed greedy policy; ``steps[h-1]`` maps features to values."""

    def __init__(self, featurizer, steps, tag):
        self.featurizer = featurizer
        self.steps = list(steps)
        self.tag = tag

    @property
    def horizon(self):
        return len(self.steps)

    def q_values(self, h, states):
        step = self.steps[h - 1]
        if hasattr(step, "block_values") and isinstance(self.featurizer, envs.BanditFeatures):
            return step.block_values(self.featurizer.normalized_states(states), self.featurizer.n_actions)
        return step(self.featurizer(states))

    def values(self, h, states):
        return self.q_values(h, states).max(axis=-1)

    def act(self, h, states):
        return np.argmax(self.q_values(h, states), axis=-1)

    def act_one(self, h, state):
        """Greedy action for a single state."""
        return int(self.act(h, [state])[0])

    def table(self):
        """(H, S) action table; only for integer-state MDP featurizers."""
        states = np.arange(self.featurizer.spec.n_states)
        return np.stack([self.act(h, states) for h in range(1, self.horizon + 1)])


@dataclass
class EnsembleValueFn:
    steps: list
    psi: float = 0.0

    def __call__(self, h, feats):
        return self.steps[h - 1](feats)


# --- configuration -------------------------------------------------------------


@dataclass
class ViperConfig:
    M: int = 10
    sigma: float | list = 1.0
    lam: float = 0.01
    eta: float | None = None
    J: int = 1000
    psi: float = 0.0
    split_enabled: bool = False
    seed: int = 0
    width: int = 64
    zeta_enabled: bool = True
    init_scope: str = "per_step"
    workers: int = 1

    def __post_init__(self):
        if int(self.M) < 1:
            raise ConfigError(f"M must be >= 1, got {self.M}")
        if self.psi < 0:
            raise ConfigError(f"psi must be >= 0, got {self.psi}")
        sig = np.atleast_1d(self.sigma)
        if np.any(sig < 0):
            raise ConfigError("sigma must be >= 0")
        if self.init_scope not in ("global", "per_step", "per_member"):
            raise ConfigError(f"unknown init_scope {self.init_scope!r}")
        if not self.lam > 0:
            raise ConfigError(f"lambda must be > 0, got {self.lam}")

    def sigma_at(self, h, H):
        if np.isscalar(self.sigma):
            return float(self.sigma)
        sig = list(self.sigma)
        if len(sig) != H:
            raise ConfigError(f"sigma has {len(sig)} entries for horizon {H}")
        return float(sig[h - 1])


def substream(seed, *key):
    """Independent generator for a (seed, key...) path."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(k) for k in key]]))


_NOISE, _INIT = 1, 2


# --- shared pieces -------------------------------------------------------------


def perturb_targets(rewards, v_next, sigma, rng):
    """y_k = r_k + V_next(s'_k) + xi_k with xi_k ~ N(0, sigma^2)."""
    rewards = np.asarray(rewards, dtype=float)
    base = rewards + np.asarray(v_next, dtype=float)
    if sigma == 0:
        return base
    return base + sigma * rng.standard_normal(rewards.shape[0])


def _step_inputs(dataset, featurizer, h):
    states, actions, rewards, next_states = dataset.step(h)
    if actions.shape[0] == 0:
        raise DomainError(f"no records at step {h}")
    feats = featurizer(states)
    X = feats[np.arange(actions.shape[0]), actions]
    return X, states, actions, rewards, next_states


def _v_next(steps_done, featurizer, h, H, next_states):
    if h == H:
        return np.zeros(len(next_states))
    return steps_done[h](featurizer(next_states)).max(axis=-1)


def _block_inputs(featurizer, states, actions):
    if isinstance(featurizer, envs.BanditFeatures):
        return models.BlockInputs(featurizer.normalized_states(states), actions, featurizer.n_actions)
    return None


def _map(fn, items, workers):
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


# --- VIPeR -----------------------------------------------------------------------


def lin_viper_solve(X, targets, lam, sigma, rng, zeta_enabled=True, acc=None):
    """theta = Lambda^{-1}[X^T (y + xi) - lam zeta], xi ~ N(0, sigma^2), zeta ~ N(0, sigma^2 I).

    ``xi`` is drawn before ``zeta`` from ``rng``.
    """
    X = np.asarray(X, dtype=float)
    d = X.shape[1]
    if acc is None:
        acc = CovarianceAccumulator(d, lam).update_many(X)
    y = perturb_targets(targets, np.zeros_like(targets), sigma, rng)
    zeta = sigma * rng.standard_normal(d) if (zeta_enabled and sigma > 0) else np.zeros(d)
    return models.LinearParams(acc.solve(X.T @ y - lam * zeta))


def _init_params(cfg, p, h, i):
    if cfg.init_scope == "global":
        key = (0, 0)
    elif cfg.init_scope == "per_step":
        key = (h, 0)
    else:
        key = (h, i)
    return models.symmetric_init(cfg.width, p, substream(cfg.seed, _INIT, *key))


def viper_fit(dataset, featurizer, family="neural", cfg=None):
    """Value iteration with perturbed rewards.

    Returns ``(ensemble, policy)``. Member ``i`` at step ``h`` draws its target
    noise and regularizer shift from substream ``(seed, h, i)``, so results do
    not depend on ``cfg.workers``.
    """
    cfg = cfg or ViperConfig()
    if family not in ("neural", "linear"):
        raise ConfigError(f"unknown model family {family!r}")
    ds = dataset.with_split(cfg.split_enabled) if dataset.split_enabled != cfg.split_enabled else dataset
    H = ds.H
    steps = [None] * H
    for h in range(H, 0, -1):
        X, states, actions, rewards, next_states = _step_inputs(ds, featurizer, h)
        base = rewards + _v_next(steps, featurizer, h, H, next_states)
        sigma = cfg.sigma_at(h, H)
        cap = (H - h + 1) * (1.0 + cfg.psi)
        if family == "linear":
            acc = CovarianceAccumulator(X.shape[1], cfg.lam).update_many(X)

            def member(i, X=X, base=base, sigma=sigma, acc=acc, h=h):
                rng = substream(cfg.seed, _NOISE, h, i)
                return lin_viper_solve(X, base, cfg.lam, sigma, rng, cfg.zeta_enabled, acc).theta

            steps[h - 1] = LinearEnsembleQ(np.array(_map(member, range(cfg.M), cfg.workers)), cap)
            continue

        blocks = _block_inputs(featurizer, states, actions)
        gd_X = blocks if blocks is not None else X
        eta = cfg.eta if cfg.eta is not None else models.safe_step_size(X, cfg.lam)
        gd = models.GdConfig(cfg.lam, eta, cfg.J)
        shared = _init_params(cfg, X.shape[1], h, 0)
        model_cls = models.BlockNetModel if blocks is not None else models.NetModel

        def member(i, gd_X=gd_X, base=base, sigma=sigma, h=h, gd=gd, shared=shared):
            rng = substream(cfg.seed, _NOISE, h, i)
            params = shared if cfg.init_scope != "per_member" else _init_params(cfg, X.shape[1], h, i)
            y = perturb_targets(base, np.zeros_like(base), sigma, rng)
            if cfg.zeta_enabled and sigma > 0:
                zeta = sigma * rng.standard_normal(params.W0.shape)
            else:
                zeta = None
            try:
                res = models.gradient_descent(model_cls(params.b), gd, gd_X, y, zeta, params.W0)
            except NumericError as exc:
                raise NumericError(str(exc), iteration=exc.iteration, context={"h": h, "i": i}) from None
            return res.params, params.b

        out = _map(member, range(cfg.M), cfg.workers)
        if cfg.init_scope == "per_member":
            # members carry their own output signs
            steps[h - 1] = _MixedNetEnsemble([NetEnsembleQ(W, b, cap) for W, b in out], cap)
        else:
            steps[h - 1] = NetEnsembleQ(np.array([W for W, _ in out]), out[0][1], cap)
    ens = EnsembleValueFn(steps, cfg.psi)
    tag = "neural-viper" if family == "neural" else "lin-viper"
    return ens, Policy(featurizer, steps, tag)


class _MixedNetEnsemble:
    """Ensemble whose members were initialized independently."""

    family = "neural-mixed"

    def __init__(self, parts, cap):
        self.parts = parts
        self.cap = float(cap)

    @property
    def n_members(self):
        return len(self.parts)

    def raw(self, feats):
        return np.min([p.raw(feats) for p in self.parts], axis=0)

    def __call__(self, feats):
        return np.clip(self.raw(feats), 0.0, self.cap)


# --- linear baselines ------------------------------------------------------------


def linlcb_fit(dataset, featurizer, beta=1.0, lam=0.01):
    """Pessimistic value iteration with an explicit elliptical bonus."""
    if beta < 0:
        raise ConfigError(f"beta must be >= 0, got {beta}")
    H = dataset.H
    steps = [None] * H
    for h in range(H, 0, -1):
        X, _, _, rewards, next_states = _step_inputs(dataset, featurizer, h)
        y = rewards + _v_next(steps, featurizer, h, H, next_states)
        acc = CovarianceAccumulator(X.shape[1], lam).update_many(X)
        theta = acc.solve(X.T @ y)
        steps[h - 1] = LinearLcbQ(theta, acc, beta, H - h + 1)
    return Policy(featurizer, steps, "linlcb" if beta > 0 else "lingreedy")


def lingreedy_fit(dataset, featurizer, lam=0.01):
    return linlcb_fit(dataset, featurizer, beta=0.0, lam=lam)


# --- neural baselines --------------------------------------------------------------


@dataclass
class NetConfig:
    width: int = 64
    lam: float = 0.01
    eta: float | None = None
    J: int = 1000
    seed: int = 0


def _fit_net_step(dataset, featurizer, steps, h, net):
    X, states, actions, rewards, next_states = _step_inputs(dataset, featurizer, h)
    y = rewards + _v_next(steps, featurizer, h, dataset.H, next_states)
    params = models.symmetric_init(net.width, X.shape[1], substream(net.seed, _INIT, h, 0))
    blocks = _block_inputs(featurizer, states, actions)
    model = models.BlockNetModel(params.b) if blocks is not None else models.NetModel(params.b)
    eta = net.eta if net.eta is not None else models.safe_step_size(X, net.lam)
    gd = models.GdConfig(net.lam, eta, net.J)
    try:
        res = models.gradient_descent(model, gd, blocks if blocks is not None else X, y, None, params.W0)
    except NumericError as exc:
        raise NumericError(str(exc), iteration=exc.iteration, context={"h": h}) from None
    return X, params.with_weights(res.params)


def neuralcb_fit(dataset, featurizer, net=None, beta=1.0, mode="full", grad_at="trained"):
    """NeuraLCB: a greedy net fit penalized by the gradient-feature bonus.

    ``mode="full"`` keeps the exact covariance (low-rank form when there are
    fewer records than parameters); ``mode="diag"`` its diagonal.
    """
    net = net or NetConfig()
    if beta < 0:
        raise ConfigError(f"beta must be >= 0, got {beta}")
    if mode not in ("full", "diag"):
        raise ConfigError(f"unknown NeuraLCB mode {mode!r}")
    H = dataset.H
    steps = [None] * H
    for h in range(H, 0, -1):
        X, params = _fit_net_step(dataset, featurizer, steps, h, net)
        gp = params if grad_at == "trained" else params.with_weights(params.W0)
        G = models.grad(gp, X)
        p = G.shape[1]
        if mode == "diag":
            acc_mode = "diagonal"
        else:
            acc_mode = "lowrank" if G.shape[0] < p else "full"
        acc = CovarianceAccumulator(p, net.lam, mode=acc_mode).update_many(G)
        steps[h - 1] = NetLcbQ(params, acc, beta, H - h + 1, grad_at)
    tag = "neuralcb" if mode == "full" else "neuralcb-diag"
    return Policy(featurizer, steps, tag if beta > 0 else "neuralgreedy")


def neuralgreedy_fit(dataset, featurizer, net=None):
    net = net or NetConfig()
    H = dataset.H
    steps = [None] * H
    for h in range(H, 0, -1):
        _, params = _fit_net_step(dataset, featurizer, steps, h, net)
        steps[h - 1] = NetEnsembleQ(params.W[None], params.b, H - h + 1)
    return Policy(featurizer, steps, "neuralgreedy")


# --- serialization -------------------------------------------------------------------


def featurizer_to_dict(featurizer):
    if isinstance(featurizer, envs.MdpFeatures):
        return {"kind": "linear-mdp", "spec": envs.spec_to_text(featurizer.spec)}
    task = featurizer.task
    out = {"kind": "bandit", "task_kind": task.kind, "dim": task.dim, "n_actions": task.n_actions,
           "epsilon": task.epsilon, "noise_std": task.noise_std, "seed": task.seed}
    if task.is_mnist:
        out["store_digest"] = task.image_store.source_digest
    else:
        out["action_params"] = np.asarray(task.action_params).tolist()
    return out


def featurizer_from_dict(d, store=None):
    if d["kind"] == "linear-mdp":
        return envs.MdpFeatures(envs.spec_from_text(d["spec"]))
    if d["task_kind"] == "mnist":
        if store is None or store.source_digest != d.get("store_digest"):
            raise DomainError("mnist policy needs the matching image store")
        task = envs.make_bandit_task("mnist", epsilon=d["epsilon"], noise_std=d["noise_std"], store=store)
    else:
        task = envs.BanditTask(d["task_kind"], d["dim"], d["n_actions"],
                               np.array(d["action_params"]), None, d["epsilon"], d["noise_std"], d["seed"])
    return envs.BanditFeatures(task)


def save_policy(policy, path):
    """Write a policy as an ``.npz`` archive with a JSON header."""
    arrays = {}
    kinds = []
    for h, step in enumerate(policy.steps, 1):
        if isinstance(step, _MixedNetEnsemble):
            raise ConfigError("policies with independently initialized members cannot be saved")
        kinds.append({"family": step.family, "cap": step.cap,
                      "mode": getattr(getattr(step, "acc", None), "mode", None),
                      "grad_at": getattr(step, "grad_at", None)})
        for k, v in step.arrays().items():
            arrays[f"h{h}_{k}"] = v
    header = {"tag": policy.tag, "featurizer": featurizer_to_dict(policy.featurizer), "steps": kinds}
    arrays["header"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_policy(path, store=None):
    with np.load(path) as z:
        header = json.loads(bytes(z["header"]).decode())
        data = {k: z[k] for k in z.files}
    featurizer = featurizer_from_dict(header["featurizer"], store)
    steps = []
    for h, info in enumerate(header["steps"], 1):
        a = {k[len(f"h{h}_"):]: v for k, v in data.items() if k.startswith(f"h{h}_")}
        fam, cap = info["family"], info["cap"]
        if fam == "linear":
            steps.append(LinearEnsembleQ(a["thetas"], cap))
        elif fam == "neural":
            steps.append(NetEnsembleQ(a["Ws"], a["b"], cap))
        elif fam == "linear-lcb":
            steps.append(LinearLcbQ(a["theta"], _acc_from_arrays(a, info["mode"]), float(a["beta"]), cap))
        else:
            params = models.NetParams(W=a["W"], b=a["b"], W0=a["W0"])
            steps.append(NetLcbQ(params, _acc_from_arrays(a, info["mode"]), float(a["beta"]), cap,
                                 info["grad_at"]))
    return Policy(featurizer, steps, header["tag"])


def policy_action(path, h, state, store=None):
    """Greedy action of a saved policy at step ``h`` for one state."""
    return load_policy(path, store).act_one(h, state)
