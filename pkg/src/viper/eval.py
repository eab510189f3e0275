"""Ground-truth values, suboptimality, latency benchmarks and moment checks."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import envs
from .uq import CovarianceAccumulator, ensemble_size, normal_cdf

REPORT_FIELDS = ("algo", "K", "H", "m", "M", "sigma", "beta", "seed", "subopt", "stderr",
                 "fit_ms", "select_us_median", "select_us_p95")


@dataclass
class SuboptReport:
    algo: str
    K: int
    H: int
    seed: int
    subopt: float
    stderr: float = 0.0
    m: int | str = ""
    M: int | str = ""
    sigma: float | str = ""
    beta: float | str = ""
    fit_ms: float = 0.0
    select_us_median: float | str = ""
    select_us_p95: float | str = ""

    def row(self):
        d = asdict(self)
        return {k: d[k] for k in REPORT_FIELDS}


def reports_to_csv(reports):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        row = r.row() if isinstance(r, SuboptReport) else r
        w.writerow({k: _fmt(row.get(k, "")) for k in REPORT_FIELDS})
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.10g}"
    return v


# --- exact dynamic programming on the hard linear MDP -------------------------


def _policy_table(spec, policy):
    if isinstance(policy, str):
        return None
    if hasattr(policy, "act"):
        states = np.arange(spec.n_states)
        return np.stack([np.asarray(policy.act(h, states)) for h in range(1, spec.horizon + 1)])
    table = np.asarray(policy, dtype=np.int64)
    if table.shape != (spec.horizon, spec.n_states):
        raise ValueError(f"policy table must have shape {(spec.horizon, spec.n_states)}")
    return table


def _model_tables(spec):
    """Mean rewards (S, A) and transition kernels (H, S, A, S)."""
    feats = spec.features()
    R = feats @ spec.theta
    P = np.empty((spec.horizon, spec.n_states, spec.n_actions, spec.n_states))
    for h in range(1, spec.horizon + 1):
        nus = np.stack([spec.nu(h, s2) for s2 in range(spec.n_states)], axis=1)
        P[h - 1] = feats @ nus
    return R, P


def exact_values(spec, policy="optimal"):
    """Backward DP. Returns (V, Q) with V of shape (H+1, S), Q of shape (H, S, A);
    row ``h-1`` belongs to step ``h`` and ``V[H] = 0``."""
    table = _policy_table(spec, policy)
    R, P = _model_tables(spec)
    H, S = spec.horizon, spec.n_states
    V = np.zeros((H + 1, S))
    Q = np.zeros((H, S, spec.n_actions))
    for h in range(H, 0, -1):
        Q[h - 1] = R + P[h - 1] @ V[h]
        if table is None:
            V[h - 1] = Q[h - 1].max(axis=1)
        else:
            V[h - 1] = Q[h - 1][np.arange(S), table[h - 1]]
    return V, Q


def bellman_residual(spec, policy):
    """max |V_h(s) - (r + P V_{h+1})(s, pi_h(s))| over all (h, s)."""
    table = _policy_table(spec, policy)
    V, _ = exact_values(spec, policy)
    R, P = _model_tables(spec)
    worst = 0.0
    for h in range(1, spec.horizon + 1):
        for s in range(spec.n_states):
            a = int(table[h - 1, s]) if table is not None else None
            if a is None:
                target = max(R[s, b] + P[h - 1, s, b] @ V[h] for b in range(spec.n_actions))
            else:
                target = R[s, a] + P[h - 1, s, a] @ V[h]
            worst = max(worst, abs(V[h - 1, s] - target))
    return worst


def subopt_mdp(spec, policy):
    """E_{s1 ~ Unif{0,1}}[V*_1(s1) - V^pi_1(s1)]."""
    v_star, _ = exact_values(spec, "optimal")
    v_pi, _ = exact_values(spec, policy)
    return float(np.mean(v_star[0] - v_pi[0]))


# --- Monte-Carlo suboptimality for bandits ------------------------------------


def eval_states(task, n_eval=1000, seed=0):
    """Fresh evaluation states, fixed by ``seed`` and shared across algorithms."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xE7A1]))
    return envs.sample_bandit_states(task, n_eval, rng)


def subopt_bandit_mc(task, policy, n_eval=1000, seed=0, states=None):
    """Mean and standard error of max_a r(s, a) - r(s, pi(s)) over evaluation states."""
    if states is None:
        states = eval_states(task, n_eval, seed)
    means = envs.bandit_mean_rewards(task, states)
    acts = policy.act(1, states) if hasattr(policy, "act") else np.asarray(policy(states))
    gaps = means.max(axis=1) - means[np.arange(means.shape[0]), acts]
    n = gaps.shape[0]
    se = float(gaps.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return float(gaps.mean()), se


# --- latency -------------------------------------------------------------------


@dataclass
class LatencyRow:
    policy: str
    median_us: float
    p95_us: float
    samples: np.ndarray = field(repr=False)


def timing_benchmark(policies, states, repeats=3, warmup=100, h=1):
    """Per-call latency of ``policy.act_one`` over ``states``.

    ``policies`` maps names to policies. Each of ``repeats`` rounds times every
    policy over all ``states`` in turn, after ``warmup`` discarded calls; the
    policy order rotates between rounds so slow machine drift is shared.
    BLAS is pinned to one thread while measuring.
    """
    states = list(states)
    names = list(policies)
    samples = {n: [] for n in names}
    clock = time.perf_counter_ns
    with threadpool_limits(limits=1):
        for r in range(max(1, int(repeats))):
            k = r % len(names)
            for n in names[k:] + names[:k]:
                act = policies[n].act_one
                for i in range(warmup):
                    act(h, states[i % len(states)])
                for s in states:
                    t0 = clock()
                    act(h, s)
                    samples[n].append(clock() - t0)
    rows = {}
    for n in names:
        us = np.asarray(samples[n], dtype=float) / 1e3
        rows[n] = LatencyRow(n, float(np.median(us)), float(np.percentile(us, 95)), us)
    return rows


def latency_csv(rows):
    buf = io.StringIO()
    buf.write("policy,sample_index,latency_us\n")
    for name, row in rows.items():
        for i, v in enumerate(row.samples):
            buf.write(f"{name},{i},{v:.3f}\n")
    return buf.getvalue()


# --- statistical validators ---------------------------------------------------


@dataclass
class LawReport:
    passed: bool
    sigma: float
    n_draws: int
    mean_abs_err: np.ndarray
    mean_tol: np.ndarray
    cov_rel_err: float
    cov_tol: float
    theta_hat: np.ndarray = field(repr=False)
    draws: np.ndarray = field(repr=False)

    def lines(self):
        return [f"sigma={self.sigma:g} draws={self.n_draws}",
                f"max mean error {self.mean_abs_err.max():.3e} (tol {self.mean_tol.min():.3e})",
                f"covariance Frobenius relative error {self.cov_rel_err:.4f} (tol {self.cov_tol})",
                "PASS" if self.passed else "FAIL"]


def perturbed_ridge_draws(X, y, lam, sigma, n_draws, rng):
    """Closed-form perturbed ridge solutions, all draws vectorized.

    theta_i = Lambda^{-1}[X^T (y + xi_i) - lam zeta_i].
    """
    X = np.asarray(X, dtype=float)
    n, d = X.shape
    acc = CovarianceAccumulator(d, lam).update_many(X)
    xi = sigma * rng.standard_normal((n_draws, n))
    zeta = sigma * rng.standard_normal((n_draws, d))
    theta_hat = acc.solve(X.T @ np.asarray(y, float))
    if sigma == 0:
        return theta_hat, np.tile(theta_hat, (n_draws, 1)), acc
    rhs = (np.asarray(y, float)[None, :] + xi) @ X - lam * zeta
    return theta_hat, acc.solve(rhs), acc


def gaussian_law_test(X, y, lam, sigma, n_draws=100_000, seed=0, cov_tol=0.05):
    """Check the perturbed solution is N(theta_hat, sigma^2 Lambda^{-1}).

    Per-coordinate mean tolerance is ``4 sigma ||Lambda^{-1/2}|| / sqrt(n)``.
    """
    rng = np.random.default_rng(seed)
    theta_hat, draws, acc = perturbed_ridge_draws(X, y, lam, sigma, n_draws, rng)
    lam_inv = np.linalg.inv(acc.matrix())
    d = theta_hat.shape[0]
    mean_err = np.abs(draws.mean(axis=0) - theta_hat)
    op = np.sqrt(np.linalg.eigvalsh(lam_inv).max())
    mean_tol = np.full(d, 4.0 * sigma * op / np.sqrt(n_draws))
    if sigma == 0:
        cov_err = float(np.abs(draws - theta_hat).max())
        passed = cov_err == 0.0
    else:
        emp = np.cov(draws, rowvar=False)
        target = sigma**2 * lam_inv
        cov_err = float(np.linalg.norm(emp - target) / np.linalg.norm(target))
        passed = bool(np.all(mean_err <= mean_tol) and cov_err <= cov_tol)
    return LawReport(passed, float(sigma), int(n_draws), mean_err, mean_tol, cov_err, cov_tol,
                     theta_hat, draws)


@dataclass
class AntiConcentrationReport:
    shift_freq: float
    expected: float
    M: int
    ensemble_freq: float
    delta: float
    passed: bool

    def lines(self):
        return [f"P(<g, draw> <= -sigma ||g||) = {self.shift_freq:.4f} (Phi(-1) = {self.expected:.4f})",
                f"M = {self.M}: P(min over ensemble shifts) = {self.ensemble_freq:.4f} "
                f"(need >= {1 - self.delta:.2f})",
                "PASS" if self.passed else "FAIL"]


def anti_concentration_test(acc, g, sigma, n_draws=100_000, n_trials=10_000, delta=0.1,
                            H=1, S=1, A=50, seed=0, tol=0.01):
    """Empirical frequency that a posterior draw undershoots by one standard deviation,
    for a single draw and for the minimum over an ensemble of size
    ``ensemble_size(delta, H, S, A)``."""
    rng = np.random.default_rng(seed)
    g = np.asarray(g, dtype=float)
    width = sigma * acc.quad_form(g)
    draws = acc.sample(sigma, rng, size=n_draws)
    single = float(np.mean(draws @ g <= -width))
    M = ensemble_size(delta, H, S, A)
    ens = acc.sample(sigma, rng, size=n_trials * M) @ g
    ens_min = ens.reshape(n_trials, M).min(axis=1)
    ens_freq = float(np.mean(ens_min <= -width))
    expected = normal_cdf(-1.0)
    passed = abs(single - expected) <= tol and ens_freq >= 1 - delta
    return AntiConcentrationReport(single, expected, M, ens_freq, delta, passed)
