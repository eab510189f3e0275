"""Environments: the hard linear MDP and the synthetic/MNIST contextual bandits.

Steps are 1-based in every public function (``1 <= h <= H``); states of the
linear MDP are ``0`` and ``1``; actions are ``0 .. A-1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, FormatError

N_STATES = 2
N_ACTIONS = 100
FEAT_DIM = 10
CODE_BITS = 8
REWARD_LEVEL = 0.99
BEHAVIOR_P = 0.6

BANDIT_KINDS = ("cos", "exp", "mnist")


def _frozen(a):
    a = np.array(a)
    a.setflags(write=False)
    return a


def action_codes(n_actions=N_ACTIONS, bits=CODE_BITS):
    """Binary encodings of ``0..n_actions-1`` mapped to {-1, +1}, MSB first.

    Action 0 encodes to the all -1 vector.
    """
    shifts = np.arange(bits - 1, -1, -1)
    b = (np.arange(n_actions)[:, None] >> shifts) & 1
    return 2.0 * b - 1.0


@dataclass(frozen=True)
class LinearMdpSpec:
    horizon: int
    alpha_bits: np.ndarray
    seed: int = 0
    r: float = REWARD_LEVEL
    behavior_p: float = BEHAVIOR_P
    n_states: int = N_STATES
    n_actions: int = N_ACTIONS
    feat_dim: int = FEAT_DIM
    action_codes: np.ndarray = field(default_factory=lambda: _frozen(action_codes()))

    def __post_init__(self):
        object.__setattr__(self, "alpha_bits", _frozen(np.asarray(self.alpha_bits, dtype=np.int64)))
        object.__setattr__(self, "action_codes", _frozen(np.asarray(self.action_codes, dtype=float)))

    @property
    def theta(self):
        """Reward parameter, identical for every step."""
        t = np.zeros(self.feat_dim)
        t[-2], t[-1] = self.r, 1.0 - self.r
        return t

    def nu(self, h, s_next):
        """Transition measure vector for next state ``s_next`` at step ``h``."""
        _check_step(self, h)
        a = int(self.alpha_bits[h - 1])
        v = np.zeros(self.feat_dim)
        v[-2] = (1 - s_next) ^ a
        v[-1] = s_next ^ a
        return v

    def features(self):
        """Feature table of shape (S, A, d)."""
        return _feature_table(self)


def make_hard_linear_mdp(H, seed=0):
    if int(H) < 1:
        raise DomainError(f"horizon must be >= 1, got {H}")
    rng = np.random.default_rng(seed)
    alpha = rng.integers(0, 2, size=int(H))
    return LinearMdpSpec(horizon=int(H), alpha_bits=alpha, seed=int(seed))


def _check_sa(spec, s, a):
    if not (0 <= int(s) < spec.n_states):
        raise DomainError(f"state {s} outside [0, {spec.n_states})")
    if not (0 <= int(a) < spec.n_actions):
        raise DomainError(f"action {a} outside [0, {spec.n_actions})")


def _check_step(spec, h):
    if not (1 <= int(h) <= spec.horizon):
        raise DomainError(f"step {h} outside [1, {spec.horizon}]")


def _delta(s, a):
    return 1.0 if (int(s) == 0 and int(a) == 0) else 0.0


def feature_map(spec, s, a):
    _check_sa(spec, s, a)
    d = _delta(s, a)
    return np.concatenate([spec.action_codes[int(a)], [d, 1.0 - d]])


def _feature_table(spec):
    table = np.empty((spec.n_states, spec.n_actions, spec.feat_dim))
    table[:, :, : spec.action_codes.shape[1]] = spec.action_codes[None]
    table[:, :, -2] = 0.0
    table[:, :, -1] = 1.0
    table[0, 0, -2], table[0, 0, -1] = 1.0, 0.0
    return table


def transition_prob(spec, h, s, a, s_next):
    _check_sa(spec, s, a)
    _check_step(spec, h)
    if int(s_next) not in (0, 1):
        raise DomainError(f"next state {s_next} outside {{0, 1}}")
    return float(feature_map(spec, s, a) @ spec.nu(h, int(s_next)))


def next_state(spec, h, s, a):
    """The (deterministic) successor of ``(s, a)`` at step ``h``."""
    _check_sa(spec, s, a)
    _check_step(spec, h)
    alpha = int(spec.alpha_bits[h - 1])
    return alpha if _delta(s, a) else 1 - alpha


def mean_reward(spec, h, s, a):
    _check_sa(spec, s, a)
    _check_step(spec, h)
    return float(feature_map(spec, s, a) @ spec.theta)


def sample_reward(spec, h, s, a, rng, noise_std=1.0):
    """Observed reward: mean plus N(0, noise_std^2)."""
    mu = mean_reward(spec, h, s, a)
    if noise_std <= 0:
        return mu
    return mu + noise_std * rng.standard_normal()


def behavior_probs(spec, s):
    """Action distribution of the behavior policy at state ``s`` (any step)."""
    p = spec.behavior_p
    probs = np.zeros(spec.n_actions)
    if int(s) == 0:
        probs[0], probs[1] = p, 1.0 - p
    else:
        probs[0] = p
        probs[1:] = (1.0 - p) / (spec.n_actions - 1)
    return probs


# --- serialization ---------------------------------------------------------

_SPEC_HEADER = "# linear-mdp-spec v1"


def spec_to_text(spec):
    """Key-value text; reals with 17 significant digits."""
    lines = [
        _SPEC_HEADER,
        f"horizon = {spec.horizon}",
        f"seed = {spec.seed}",
        f"n_states = {spec.n_states}",
        f"n_actions = {spec.n_actions}",
        f"feat_dim = {spec.feat_dim}",
        f"r = {spec.r:.17g}",
        f"behavior_p = {spec.behavior_p:.17g}",
        "alpha_bits = " + "".join(str(int(b)) for b in spec.alpha_bits),
    ]
    for a, code in enumerate(spec.action_codes):
        bits = "".join("1" if c > 0 else "0" for c in code)
        lines.append(f"code.{a} = {bits}")
    return "\n".join(lines) + "\n"


def spec_from_text(text):
    kv = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        kv[k.strip()] = v.strip()
    try:
        n_actions = int(kv["n_actions"])
        codes = np.array(
            [[1.0 if ch == "1" else -1.0 for ch in kv[f"code.{a}"]] for a in range(n_actions)]
        )
        return LinearMdpSpec(
            horizon=int(kv["horizon"]),
            alpha_bits=np.array([int(ch) for ch in kv["alpha_bits"]], dtype=np.int64),
            seed=int(kv["seed"]),
            r=float(kv["r"]),
            behavior_p=float(kv["behavior_p"]),
            n_states=int(kv["n_states"]),
            n_actions=n_actions,
            feat_dim=int(kv["feat_dim"]),
            action_codes=codes,
        )
    except KeyError as exc:
        raise FormatError(f"missing key {exc.args[0]!r}") from None


# --- contextual bandits ----------------------------------------------------


def sample_sphere(rng, n, d):
    """Uniform draws on the unit sphere S^{d-1}."""
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@dataclass(frozen=True)
class BanditTask:
    kind: str
    dim: int
    n_actions: int
    action_params: np.ndarray | None = None
    image_store: object | None = None
    epsilon: float = 0.5
    noise_std: float = 0.0
    seed: int = 0

    @property
    def is_mnist(self):
        return self.kind == "mnist"


def make_bandit_task(kind, dim=16, n_actions=10, seed=0, epsilon=0.5, noise_std=0.0, store=None):
    if kind not in BANDIT_KINDS:
        raise DomainError(f"unknown bandit kind {kind!r}; expected one of {BANDIT_KINDS}")
    if not 0.0 <= epsilon <= 1.0:
        raise DomainError(f"epsilon must lie in [0, 1], got {epsilon}")
    if kind == "mnist":
        if store is None:
            raise DomainError("mnist task needs an image store")
        return BanditTask("mnist", store.images.shape[1], 10, None, store, epsilon, noise_std, seed)
    rng = np.random.default_rng(seed)
    theta = _frozen(sample_sphere(rng, n_actions, dim))
    return BanditTask(kind, dim, n_actions, theta, None, epsilon, noise_std, seed)


def state_vectors(task, states):
    """Map task states to input vectors (image lookup for mnist)."""
    if task.is_mnist:
        idx = np.asarray(states, dtype=np.int64)
        return task.image_store.images[idx]
    x = np.asarray(states, dtype=float)
    if x.shape[-1] != task.dim:
        raise DomainError(f"state dim {x.shape[-1]} != task dim {task.dim}")
    return x


def bandit_mean_rewards(task, states):
    """Mean rewards for every action, shape (n, A)."""
    if task.is_mnist:
        idx = np.atleast_1d(np.asarray(states, dtype=np.int64))
        labels = task.image_store.labels[idx]
        return (labels[:, None] == np.arange(task.n_actions)[None, :]).astype(float)
    s = np.atleast_2d(state_vectors(task, states))
    u = s @ task.action_params.T
    if task.kind == "cos":
        return np.cos(3.0 * u)
    return np.exp(-10.0 * u**2)


def bandit_reward(task, s, a, rng=None):
    """Observed reward for a single ``(s, a)``; noiseless unless ``task.noise_std > 0``."""
    if not 0 <= int(a) < task.n_actions:
        raise DomainError(f"action {a} outside [0, {task.n_actions})")
    if not task.is_mnist and np.asarray(s).shape != (task.dim,):
        raise DomainError(f"state shape {np.asarray(s).shape} != ({task.dim},)")
    mu = float(bandit_mean_rewards(task, [s] if not task.is_mnist else [int(s)])[0, int(a)])
    if task.noise_std > 0:
        if rng is None:
            raise DomainError("noisy rewards need an rng")
        mu += task.noise_std * rng.standard_normal()
    return mu


def optimal_actions(task, states):
    return np.argmax(bandit_mean_rewards(task, states), axis=1)


def sample_bandit_states(task, n, rng):
    if task.is_mnist:
        return rng.integers(0, task.image_store.images.shape[0], size=n)
    return sample_sphere(rng, n, task.dim)


def action_embedding(s, a, A):
    """Place ``s`` in block ``a`` of a ``len(s) * A`` vector, unit-normalized."""
    s = np.asarray(s, dtype=float)
    if not 0 <= int(a) < A:
        raise DomainError(f"action {a} outside [0, {A})")
    d = s.shape[-1]
    out = np.zeros(d * A)
    out[int(a) * d : (int(a) + 1) * d] = s
    n = np.linalg.norm(s)
    return out / n if n > 0 else out


# --- featurizers used by the learners ---------------------------------------


class MdpFeatures:
    """phi(s, a) of the hard linear MDP for a batch of integer states."""

    kind = "linear-mdp"

    def __init__(self, spec):
        self.spec = spec
        self.n_actions = spec.n_actions
        self.dim = spec.feat_dim
        self._table = spec.features()

    def __call__(self, states):
        return self._table[np.asarray(states, dtype=np.int64)]


class BanditFeatures:
    """Block action embeddings for a batch of bandit states.

    ``block_view`` exposes the per-action (normalized) state so networks can
    skip the zero blocks.
    """

    kind = "bandit"

    def __init__(self, task):
        self.task = task
        self.n_actions = task.n_actions
        self.state_dim = task.dim
        self.dim = task.dim * task.n_actions

    def normalized_states(self, states):
        x = np.atleast_2d(state_vectors(self.task, states)).astype(float)
        n = np.linalg.norm(x, axis=1, keepdims=True)
        return np.divide(x, n, out=np.zeros_like(x), where=n > 0)

    def __call__(self, states):
        x = self.normalized_states(states)
        n, d, A = x.shape[0], self.state_dim, self.n_actions
        out = np.zeros((n, A, A * d))
        for a in range(A):
            out[:, a, a * d : (a + 1) * d] = x
        return out
