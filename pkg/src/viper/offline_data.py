"""Offline datasets, behavior policies and per-step data splitting."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import envs
from .errors import ConfigError, FormatError


def split_indices(K, H):
    """Disjoint 1-based trajectory buckets, one per step (index 0 holds step 1).

    Step ``h`` gets ``[(H-h)K' + 1, ..., (H-h+1)K']`` with ``K' = K // H``;
    the trailing ``K mod H`` trajectories are unused.
    """
    K, H = int(K), int(H)
    if H < 1 or K < H:
        raise ConfigError(f"need K >= H >= 1, got K={K}, H={H}")
    kp = K // H
    return [np.arange((H - h) * kp + 1, (H - h + 1) * kp + 1) for h in range(1, H + 1)]


@dataclass
class OfflineDataset:
    """K trajectories of H transitions.

    ``states``/``next_states`` are (K, H) integer arrays for the linear MDP and
    (K, H, d) real arrays (or (K, H) image indices) for bandits.
    """

    kind: str
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    seed: int = 0
    split_enabled: bool = False
    buckets: list = field(default=None)

    def __post_init__(self):
        if self.buckets is None:
            self.buckets = self._make_buckets()

    @property
    def K(self):
        return self.actions.shape[0]

    @property
    def H(self):
        return self.actions.shape[1]

    def _make_buckets(self):
        if self.split_enabled:
            return split_indices(self.K, self.H)
        return [np.arange(1, self.K + 1) for _ in range(self.H)]

    def with_split(self, enabled):
        return OfflineDataset(self.kind, self.states, self.actions, self.rewards,
                              self.next_states, self.seed, bool(enabled))

    def step(self, h):
        """Records used at step ``h`` (1-based): (states, actions, rewards, next_states)."""
        rows = self.buckets[h - 1] - 1
        c = h - 1
        return (self.states[rows, c], self.actions[rows, c],
                self.rewards[rows, c], self.next_states[rows, c])


def collect_mdp_data(spec, K, seed=0, reward_noise_std=2.0, split_enabled=False):
    """Roll out the behavior policy of the hard instance for K trajectories.

    Initial states are uniform over {0, 1}; observed rewards are the mean plus
    N(0, reward_noise_std^2).
    """
    if int(K) < 1:
        raise ConfigError(f"K must be >= 1, got {K}")
    K, H = int(K), spec.horizon
    rng = np.random.default_rng(seed)
    p = spec.behavior_p
    S = np.zeros((K, H), dtype=np.int64)
    A = np.zeros((K, H), dtype=np.int64)
    R = np.zeros((K, H))
    Sn = np.zeros((K, H), dtype=np.int64)
    s = rng.integers(0, 2, size=K)
    mean_table = spec.features() @ spec.theta
    for c in range(H):
        take0 = rng.random(K) < p
        other = np.where(s == 0, 1, rng.integers(1, spec.n_actions, size=K))
        a = np.where(take0, 0, other)
        alpha = int(spec.alpha_bits[c])
        delta = (s == 0) & (a == 0)
        s_next = np.where(delta, alpha, 1 - alpha)
        r = mean_table[s, a]
        if reward_noise_std > 0:
            r = r + reward_noise_std * rng.standard_normal(K)
        S[:, c], A[:, c], R[:, c], Sn[:, c] = s, a, r, s_next
        s = s_next
    return OfflineDataset("linear-mdp", S, A, R, Sn, seed=int(seed), split_enabled=split_enabled)


def collect_bandit_data(task, K, seed=0):
    """Log K rounds of the (1 - epsilon)-optimal behavior policy (H = 1)."""
    if int(K) < 1:
        raise ConfigError(f"K must be >= 1, got {K}")
    K = int(K)
    rng = np.random.default_rng(seed)
    states = envs.sample_bandit_states(task, K, rng)
    means = envs.bandit_mean_rewards(task, states)
    best = np.argmax(means, axis=1)
    explore = rng.random(K) < task.epsilon
    # uniform over the A-1 non-optimal actions
    shift = rng.integers(1, task.n_actions, size=K)
    actions = np.where(explore, (best + shift) % task.n_actions, best)
    rewards = means[np.arange(K), actions]
    if task.noise_std > 0:
        rewards = rewards + task.noise_std * rng.standard_normal(K)
    st = states[:, None] if task.is_mnist else states[:, None, :]
    return OfflineDataset(f"bandit-{task.kind}", st, actions[:, None], rewards[:, None],
                          st.copy(), seed=int(seed))


# --- columnar text format ---------------------------------------------------
#
#   # offline-dataset v1
#   # kind=<kind> K=<K> H=<H> seed=<seed> split=<0|1> state_dim=<0 for ids>
#   k  h  a  r  s[0..]  s_next[0..]
#
# one transition per line, tab separated, reals with 17 significant digits.

_HEADER = "# offline-dataset v1"


def save_dataset(ds, path):
    state_dim = 0 if ds.states.ndim == 2 else ds.states.shape[2]
    lines = [_HEADER,
             f"# kind={ds.kind} K={ds.K} H={ds.H} seed={ds.seed} "
             f"split={int(ds.split_enabled)} state_dim={state_dim}"]
    for k in range(ds.K):
        for c in range(ds.H):
            if state_dim:
                s = "\t".join(f"{v:.17g}" for v in ds.states[k, c])
                sn = "\t".join(f"{v:.17g}" for v in ds.next_states[k, c])
            else:
                s, sn = str(int(ds.states[k, c])), str(int(ds.next_states[k, c]))
            lines.append(f"{k + 1}\t{c + 1}\t{int(ds.actions[k, c])}\t{ds.rewards[k, c]:.17g}\t{s}\t{sn}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path):
    text = Path(path).read_text().splitlines()
    if len(text) < 2 or text[0].strip() != _HEADER:
        raise FormatError("missing dataset header", path=path, offset=0)
    meta = dict(tok.split("=", 1) for tok in text[1].lstrip("# ").split())
    try:
        K, H, sd = int(meta["K"]), int(meta["H"]), int(meta["state_dim"])
    except KeyError as exc:
        raise FormatError(f"header lacks {exc.args[0]}", path=path) from None
    body = [ln for ln in text[2:] if ln.strip()]
    if len(body) != K * H:
        raise FormatError(f"expected {K * H} transitions, found {len(body)}", path=path)
    A = np.zeros((K, H), dtype=np.int64)
    R = np.zeros((K, H))
    if sd:
        S, Sn = np.zeros((K, H, sd)), np.zeros((K, H, sd))
    else:
        S, Sn = np.zeros((K, H), dtype=np.int64), np.zeros((K, H), dtype=np.int64)
    for ln in body:
        f = ln.split("\t")
        k, c = int(f[0]) - 1, int(f[1]) - 1
        A[k, c], R[k, c] = int(f[2]), float(f[3])
        if sd:
            S[k, c] = [float(v) for v in f[4 : 4 + sd]]
            Sn[k, c] = [float(v) for v in f[4 + sd : 4 + 2 * sd]]
        else:
            S[k, c], Sn[k, c] = int(f[4]), int(f[5])
    return OfflineDataset(meta["kind"], S, A, R, Sn, seed=int(meta.get("seed", 0)),
                          split_enabled=bool(int(meta.get("split", 0))))
