"""Experiment runner: config parsing, grids over seeds and hyperparameters,
CSV reports, manifests and SVG plots.

Config files are flat ``key = value`` text. Lists are comma separated and
integer ranges may be written ``a..b`` or ``a..b:step`` (both ends inclusive).
Run ``viper-bench keys`` for the full schema.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import itertools
import json
import os
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import algorithms as alg
from . import envs, eval as ev, ingest
from .errors import ConfigError, ViperError
from .uq import CovarianceAccumulator
from .offline_data import collect_bandit_data, collect_mdp_data, load_dataset, save_dataset

KINDS = ("linear-mdp", "bandit-cos", "bandit-exp", "bandit-mnist", "timing", "law-tests")
LINEAR_ALGOS = ("lingreedy", "linlcb", "lin-viper")
NEURAL_ALGOS = ("neuralgreedy", "neuralcb", "neuralcb-diag", "neural-viper")
WORKERS_ENV = "VIPER_WORKERS"

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

_NEURAL_SIGMA = "0.001,0.01,0.1,1,5,10"

# (type, default per kind or shared default, description)
SCHEMA = {
    "kind": ("str", None, "experiment kind: " + ", ".join(KINDS)),
    "algos": ("strlist", {"linear-mdp": "lingreedy,linlcb,lin-viper",
                          "bandit-mnist": "linlcb,lin-viper,neuralgreedy,neuralcb-diag,neural-viper",
                          "timing": "neural-viper,neuralcb",
                          "law-tests": "",
                          "*": "linlcb,lin-viper,neuralgreedy,neuralcb,neuralcb-diag,neural-viper"},
              "algorithms to fit"),
    "K": ("intlist", {"linear-mdp": "100..1000:100", "timing": "100,1000", "law-tests": "20",
                      "*": "500..2000:500"}, "number of offline trajectories"),
    "H": ("intlist", {"linear-mdp": "20,30,50,80", "*": "1"}, "horizon"),
    "m": ("intlist", {"timing": "64,512", "*": "64"}, "network width (even)"),
    "M": ("intlist", {"linear-mdp": "1,2,10,20", "timing": "10", "*": "1,10,20"}, "ensemble size"),
    "sigma": ("floatlist", {"linear-mdp": "0,0.1,0.5,1,2", "timing": "1", "law-tests": "0.5,1",
                            "*": _NEURAL_SIGMA}, "perturbation scale"),
    "beta": ("floatlist", {"linear-mdp": "0.1,0.5,1,2", "timing": "1", "*": _NEURAL_SIGMA},
             "bonus multiplier for LCB baselines"),
    "lam": ("floatlist", "0.01", "ridge regularization lambda"),
    "eta": ("etalist", "auto", "GD step size; auto = 1/(lambda + ||X||_2^2)"),
    "J": ("intlist", {"timing": "200", "*": "1000"}, "GD iterations"),
    "psi": ("floatlist", "0", "cutoff margin"),
    "epsilon": ("floatlist", "0.5", "behavior exploration rate for bandits"),
    "seeds": ("intlist", {"linear-mdp": "0..29", "timing": "0", "law-tests": "0", "*": "0..4"}, "seeds"),
    "reward_noise": ("float", "2.0", "std of Gaussian noise on logged MDP rewards"),
    "dim": ("int", {"timing": "8", "law-tests": "3", "*": "16"}, "bandit state dimension"),
    "n_actions": ("int", {"timing": "5", "*": "10"}, "bandit actions"),
    "timing_task": ("str", "exp", "bandit reward used by the timing kind (cos or exp)"),
    "n_eval": ("int", "1000", "Monte-Carlo evaluation states"),
    "timing_states": ("int", "300", "measured action selections per policy"),
    "warmup": ("int", "100", "discarded warm-up action selections"),
    "n_draws": ("int", "100000", "draws for the law tests"),
    "split": ("bool", "0", "use disjoint per-step trajectory buckets"),
    "record_timing": ("bool", "1", "write fit_ms (wall clock); 0 makes CSVs byte-reproducible"),
    "mnist_images": ("str", "", "IDX image file for bandit-mnist"),
    "mnist_labels": ("str", "", "IDX label file for bandit-mnist"),
}


# --- config --------------------------------------------------------------------


def _int_items(text):
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        if ".." in tok:
            rng, _, step = tok.partition(":")
            lo, hi = (int(v) for v in rng.split(".."))
            step = int(step) if step else 1
            if step < 1:
                raise ValueError("range step must be >= 1")
            out.extend(range(lo, hi + 1, step))
        else:
            out.append(int(tok))
    return out


def _parse_value(typ, text):
    text = text.strip()
    if typ == "str":
        return text
    if typ == "int":
        return int(text)
    if typ == "float":
        return float(text)
    if typ == "bool":
        if text.lower() not in ("0", "1", "true", "false", "yes", "no"):
            raise ValueError(f"not a boolean: {text!r}")
        return text.lower() in ("1", "true", "yes")
    if typ == "strlist":
        return [t.strip() for t in text.split(",") if t.strip()]
    if typ == "intlist":
        return _int_items(text)
    if typ == "floatlist":
        return [float(t) for t in text.split(",") if t.strip()]
    if typ == "etalist":
        return [None if t.strip() == "auto" else float(t) for t in text.split(",") if t.strip()]
    raise AssertionError(typ)


@dataclass
class ExperimentConfig:
    values: dict
    raw: dict = field(default_factory=dict)

    def __getattr__(self, name):
        try:
            return self.__dict__["values"][name]
        except KeyError:
            raise AttributeError(name) from None

    def echo(self):
        """Normalized ``key = value`` text covering every key."""
        lines = []
        for key in SCHEMA:
            v = self.values[key]
            if isinstance(v, list):
                v = ",".join("auto" if x is None else _num(x) for x in v)
            elif isinstance(v, bool):
                v = int(v)
            lines.append(f"{key} = {_num(v)}")
        return "\n".join(lines) + "\n"


def _num(x):
    if isinstance(x, float):
        return repr(x)
    return str(x)


def parse_config(text, overrides=None):
    """Parse and validate config text; raises ConfigError listing every bad field."""
    raw, errors = {}, []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"line {lineno}: expected 'key = value'")
            continue
        key, val = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA:
            errors.append(f"line {lineno}: unknown key {key!r}")
            continue
        raw[key] = val
    raw.update(overrides or {})
    kind = raw.get("kind")
    if kind not in KINDS:
        errors.append(f"kind: must be one of {', '.join(KINDS)} (got {kind!r})")
        raise ConfigError("invalid config:\n  " + "\n  ".join(errors))
    values, unparsed = {}, set()
    for key, (typ, default, _) in SCHEMA.items():
        fallback = default.get(kind, default.get("*")) if isinstance(default, dict) else default
        try:
            values[key] = _parse_value(typ, raw.get(key, fallback))
        except ValueError as exc:
            errors.append(f"{key}: {exc}")
            # keep checking the other fields against the default
            values[key] = _parse_value(typ, fallback)
            unparsed.add(key)
    errors += [e for e in _validate(values) if e.split(":", 1)[0] not in unparsed]
    if errors:
        raise ConfigError("invalid config:\n  " + "\n  ".join(errors))
    return ExperimentConfig(values, raw)


def _validate(v):
    errs = []
    kind = v["kind"]
    lists = ["K", "H", "m", "M", "sigma", "beta", "lam", "eta", "J", "psi", "epsilon", "seeds"]
    for key in lists:
        if not v[key]:
            errs.append(f"{key}: grid must be nonempty")
    checks = [("K", lambda x: x >= 1, ">= 1"), ("H", lambda x: x >= 1, ">= 1"),
              ("m", lambda x: x >= 2 and x % 2 == 0, "even and >= 2"), ("M", lambda x: x >= 1, ">= 1"),
              ("sigma", lambda x: x >= 0, ">= 0"), ("beta", lambda x: x >= 0, ">= 0"),
              ("lam", lambda x: x > 0, "> 0"), ("eta", lambda x: x is None or x > 0, "> 0 or auto"),
              ("J", lambda x: x >= 0, ">= 0"), ("psi", lambda x: x >= 0, ">= 0"),
              ("epsilon", lambda x: 0 <= x <= 1, "in [0, 1]")]
    for key, ok, what in checks:
        bad = [x for x in v[key] if not ok(x)]
        if bad:
            errs.append(f"{key}: values must be {what}, got {bad}")
    allowed = {"linear-mdp": LINEAR_ALGOS, "law-tests": ()}.get(kind, LINEAR_ALGOS + NEURAL_ALGOS)
    bad = [a for a in v["algos"] if a not in allowed]
    if bad:
        errs.append(f"algos: {bad} not available for kind {kind}")
    if kind.startswith("bandit") and v["H"] != [1]:
        errs.append("H: bandit kinds have horizon 1")
    if kind == "bandit-mnist" and not (v["mnist_images"] and v["mnist_labels"]):
        errs.append("mnist_images/mnist_labels: required for bandit-mnist")
    if v["reward_noise"] < 0:
        errs.append("reward_noise: must be >= 0")
    for key in ("dim", "n_actions", "n_eval", "timing_states", "n_draws"):
        if v[key] < 1:
            errs.append(f"{key}: must be >= 1")
    if v["warmup"] < 0:
        errs.append("warmup: must be >= 0")
    if v["timing_task"] not in ("cos", "exp"):
        errs.append("timing_task: must be cos or exp")
    if v["split"] and any(k < h for k in v["K"] for h in v["H"]):
        errs.append("split: every K must be >= H")
    return errs


def load_config(path, overrides=None):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, overrides)


# --- grid -------------------------------------------------------------------------


@dataclass(frozen=True)
class Cell:
    H: int
    K: int
    seed: int

    @property
    def name(self):
        return f"H{self.H}-K{self.K}-s{self.seed}"


@dataclass(frozen=True)
class Variant:
    algo: str
    hyper: tuple  # sorted (key, value) pairs

    @property
    def params(self):
        return dict(self.hyper)

    @property
    def name(self):
        parts = [self.algo] + [f"{k}{'auto' if v is None else _num(v)}" for k, v in self.hyper]
        return "_".join(parts)


_HYPER_KEYS = {
    "lingreedy": ("lam",),
    "linlcb": ("lam", "beta"),
    "lin-viper": ("lam", "sigma", "M", "psi"),
    "neuralgreedy": ("lam", "m", "eta", "J"),
    "neuralcb": ("lam", "m", "beta", "eta", "J"),
    "neuralcb-diag": ("lam", "m", "beta", "eta", "J"),
    "neural-viper": ("lam", "m", "sigma", "M", "eta", "J", "psi"),
}


def cells(cfg):
    """Data cells in deterministic grid order. The timing kind sweeps widths
    through its variants, so its cells only range over K and seeds."""
    return [Cell(H, K, s) for H in cfg.H for K in cfg.K for s in cfg.seeds]


def variants(cfg):
    out = []
    for algo in cfg.algos:
        keys = _HYPER_KEYS[algo]
        for combo in itertools.product(*(cfg.values[k] for k in keys)):
            out.append(Variant(algo, tuple(zip(keys, combo))))
    return out


def _derived_seed(*key):
    return int(np.random.SeedSequence([int(k) for k in key]).generate_state(1)[0])


def _bandit_kind(cfg):
    return cfg.timing_task if cfg.kind == "timing" else cfg.kind.split("-", 1)[1]


def make_env(cfg, cell, store=None):
    """Environment for a cell: a LinearMdpSpec or a BanditTask."""
    if cfg.kind == "linear-mdp":
        return envs.make_hard_linear_mdp(cell.H, seed=cell.seed)
    kind = _bandit_kind(cfg)
    if kind == "mnist":
        store = store or ingest.load_idx(cfg.mnist_images, cfg.mnist_labels)
        return envs.make_bandit_task("mnist", epsilon=cfg.epsilon[0], seed=cell.seed, store=store)
    return envs.make_bandit_task(kind, dim=cfg.dim, n_actions=cfg.n_actions, seed=cell.seed,
                                 epsilon=cfg.epsilon[0])


def featurizer_for(env):
    return envs.MdpFeatures(env) if isinstance(env, envs.LinearMdpSpec) else envs.BanditFeatures(env)


def make_data(cfg, cell, env):
    seed = _derived_seed(cell.seed, cell.K, cell.H, 17)
    if isinstance(env, envs.LinearMdpSpec):
        return collect_mdp_data(env, cell.K, seed=seed, reward_noise_std=cfg.reward_noise,
                                split_enabled=cfg.split)
    return collect_bandit_data(env, cell.K, seed=seed)


def fit_variant(cfg, cell, ds, featurizer, variant):
    p = variant.params
    seed = _derived_seed(cell.seed, cell.K, cell.H, 29)
    ds = ds.with_split(cfg.split) if ds.split_enabled != cfg.split else ds
    a = variant.algo
    if a == "lingreedy":
        return alg.lingreedy_fit(ds, featurizer, lam=p["lam"])
    if a == "linlcb":
        return alg.linlcb_fit(ds, featurizer, beta=p["beta"], lam=p["lam"])
    if a in ("lin-viper", "neural-viper"):
        vc = alg.ViperConfig(M=p["M"], sigma=p["sigma"], lam=p["lam"], eta=p.get("eta"), J=p.get("J", 0),
                             psi=p["psi"], split_enabled=cfg.split, seed=seed, width=p.get("m", 64))
        return alg.viper_fit(ds, featurizer, "linear" if a == "lin-viper" else "neural", vc)[1]
    net = alg.NetConfig(width=p["m"], lam=p["lam"], eta=p["eta"], J=p["J"], seed=seed)
    if a == "neuralgreedy":
        return alg.neuralgreedy_fit(ds, featurizer, net)
    return alg.neuralcb_fit(ds, featurizer, net, beta=p["beta"], mode="diag" if a.endswith("diag") else "full")


def evaluate(cfg, cell, env, policy):
    if isinstance(env, envs.LinearMdpSpec):
        return ev.subopt_mdp(env, policy), 0.0
    states = ev.eval_states(env, cfg.n_eval, seed=cell.seed)
    return ev.subopt_bandit_mc(env, policy, states=states)


def _report(cfg, cell, variant, subopt, stderr, fit_ms, latency=None):
    p = variant.params
    return ev.SuboptReport(
        algo=variant.algo, K=cell.K, H=cell.H, seed=cell.seed, subopt=subopt, stderr=stderr,
        m=p.get("m", ""), M=p.get("M", ""), sigma=p.get("sigma", ""), beta=p.get("beta", ""),
        fit_ms=fit_ms if cfg.record_timing else "",
        select_us_median=latency.median_us if latency else "",
        select_us_p95=latency.p95_us if latency else "")


def _timed_fit(cfg, cell, ds, featurizer, variant):
    t0 = time.perf_counter()
    pol = fit_variant(cfg, cell, ds, featurizer, variant)
    return pol, (time.perf_counter() - t0) * 1e3


def run_cell(cfg, cell, store=None, latency_sink=None):
    """Fit and evaluate every variant on one data cell.

    Returns ``(rows, failures)``; a failing variant is recorded and skipped.
    """
    env = make_env(cfg, cell, store)
    featurizer = featurizer_for(env)
    ds = make_data(cfg, cell, env)
    rows, failures = [], []
    bench_states = None
    if cfg.kind == "timing":
        bench_states = list(ev.eval_states(env, cfg.timing_states, seed=cell.seed + 7919))
    for var in variants(cfg):
        try:
            pol, fit_ms = _timed_fit(cfg, cell, ds, featurizer, var)
            sub, se = evaluate(cfg, cell, env, pol)
            lat = None
            if bench_states is not None:
                lat = ev.timing_benchmark({var.name: pol}, bench_states, warmup=cfg.warmup)[var.name]
                if latency_sink is not None:
                    latency_sink[(cell.name, var.name)] = lat
            rows.append(_report(cfg, cell, var, sub, se, fit_ms, lat))
        except (ViperError, FloatingPointError, np.linalg.LinAlgError) as exc:
            failures.append({"cell": cell.name, "variant": var.name, "error": f"{type(exc).__name__}: {exc}"})
    return rows, failures


# --- output helpers -------------------------------------------------------------


def _atomic_write(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    with os.fdopen(fd, "wb") as fh:
        fh.write(data.encode() if isinstance(data, str) else data)
    os.replace(tmp, path)


def content_digest(data):
    """Git blob digest of ``data``."""
    data = data.encode() if isinstance(data, str) else data
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _manifest(cfg, csv_text, failures, extra=None):
    out = {"config": cfg.echo(), "grid": {k: cfg.values[k] for k in SCHEMA if isinstance(cfg.values[k], list)},
           "n_cells": len(cells(cfg)), "n_variants": len(variants(cfg)),
           "results_digest": content_digest(csv_text), "failures": failures}
    out.update(extra or {})
    return json.dumps(out, indent=2, sort_keys=True) + "\n"


def resolve_workers(flag):
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
    else:
        n = flag if flag is not None else 1
    if n < 1:
        raise ConfigError(f"worker count must be >= 1, got {n}")
    return n


# --- SVG plots ---------------------------------------------------------------------

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#e377c2")


def _float(v):
    try:
        return float(v)
    except (TypeError, ValueError):
        return None


def read_results(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def best_settings(rows, metric="subopt"):
    """For each algorithm, the hyperparameter setting (m, M, sigma, beta) with the
    lowest mean metric over all rows."""
    groups = {}
    for r in rows:
        key = (r["algo"], r["m"], r["M"], r["sigma"], r["beta"])
        val = _float(r[metric])
        if val is not None:
            groups.setdefault(key, []).append(val)
    best = {}
    for key, vals in sorted(groups.items()):
        score = float(np.mean(vals))
        if key[0] not in best or score < best[key[0]][1]:
            best[key[0]] = (key, score)
    return {a: k for a, (k, _) in best.items()}


def svg_lines(series, title, xlabel, ylabel, log_y=True, width=640, height=420):
    """Line plot with mean +- std bands. ``series`` maps a label to (x, mean, std)."""
    ml, mr, mt, mb = 70, 150, 40, 50
    xs = np.concatenate([np.asarray(s[0], float) for s in series.values()])
    lo_vals = np.concatenate([np.asarray(s[1], float) - np.asarray(s[2], float) for s in series.values()])
    hi_vals = np.concatenate([np.asarray(s[1], float) + np.asarray(s[2], float) for s in series.values()])
    means = np.concatenate([np.asarray(s[1], float) for s in series.values()])
    if log_y:
        floor = max(np.min(means[means > 0]) / 10 if np.any(means > 0) else 1e-6, 1e-12)
        tf = lambda v: np.log10(np.maximum(v, floor))  # noqa: E731
    else:
        tf = lambda v: np.asarray(v, float)  # noqa: E731
    ylo, yhi = float(np.min(tf(lo_vals))), float(np.max(tf(hi_vals)))
    if yhi - ylo < 1e-12:
        ylo, yhi = ylo - 0.5, yhi + 0.5
    xlo, xhi = float(xs.min()), float(xs.max())
    if xhi - xlo < 1e-12:
        xlo, xhi = xlo - 0.5, xhi + 0.5
    pw, ph = width - ml - mr, height - mt - mb

    def px(x):
        return ml + (np.asarray(x, float) - xlo) / (xhi - xlo) * pw

    def py(y):
        return mt + ph - (tf(y) - ylo) / (yhi - ylo) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<text x="{ml + pw / 2:.1f}" y="22" text-anchor="middle" font-size="14">{title}</text>',
           f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
           f'<text x="{ml + pw / 2:.1f}" y="{height - 10}" text-anchor="middle" font-size="12">{xlabel}</text>',
           f'<text x="16" y="{mt + ph / 2:.1f}" text-anchor="middle" font-size="12" '
           f'transform="rotate(-90 16 {mt + ph / 2:.1f})">{ylabel}{" (log)" if log_y else ""}</text>']
    for t in np.linspace(ylo, yhi, 5):
        y = mt + ph - (t - ylo) / (yhi - ylo) * ph
        lab = f"{10 ** t:.3g}" if log_y else f"{t:.3g}"
        out.append(f'<text x="{ml - 6}" y="{y + 4:.1f}" text-anchor="end" font-size="10">{lab}</text>')
    for t in np.linspace(xlo, xhi, 5):
        out.append(f'<text x="{px(t):.1f}" y="{mt + ph + 16}" text-anchor="middle" font-size="10">{t:.4g}</text>')
    for i, (label, (x, m, s)) in enumerate(series.items()):
        color = _COLORS[i % len(_COLORS)]
        x, m, s = (np.asarray(v, float) for v in (x, m, s))
        upper = list(zip(px(x), py(m + s)))
        lower = list(zip(px(x), py(m - s)))[::-1]
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in upper + lower)
        out.append(f'<polygon points="{pts}" fill="{color}" fill-opacity="0.15" stroke="none"/>')
        line = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px(x), py(m)))
        out.append(f'<polyline points="{line}" fill="none" stroke="{color}" stroke-width="2"/>')
        ly = mt + 14 + 18 * i
        out.append(f'<line x1="{width - mr + 10}" y1="{ly}" x2="{width - mr + 30}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{width - mr + 35}" y="{ly + 4}" font-size="11">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _series(rows, x_key, metric):
    """Mean and std across seeds of ``metric`` for each x value."""
    by_x = {}
    for r in rows:
        v, x = _float(r[metric]), _float(r[x_key])
        if v is not None and x is not None:
            by_x.setdefault(x, []).append(v)
    xs = sorted(by_x)
    return (xs, [float(np.mean(by_x[x])) for x in xs],
            [float(np.std(by_x[x])) for x in xs])


def plot_results(rows, out_dir, x_key="K", metric="subopt"):
    """One SVG per horizon (and per varying width/ensemble size where swept).

    Each algorithm is drawn at its best hyperparameter setting. Returns the
    paths written; raises ConfigError when there is nothing to plot.
    """
    rows = [r for r in rows if _float(r.get(metric)) is not None]
    if not rows:
        raise ConfigError(f"no rows with a {metric} value to plot")
    out_dir = Path(out_dir)
    paths = []
    best = best_settings(rows, metric)
    for H in sorted({r["H"] for r in rows}, key=int):
        sub = [r for r in rows if r["H"] == H]
        series = {}
        for algo, key in best.items():
            sel = [r for r in sub if (r["algo"], r["m"], r["M"], r["sigma"], r["beta"]) == key]
            if sel:
                series[algo] = _series(sel, x_key, metric)
        if series:
            path = out_dir / f"{metric}_vs_{x_key}_H{H}.svg"
            _atomic_write(path, svg_lines(series, f"H = {H}", x_key, metric))
            paths.append(path)
    # extra sweeps: ensemble size and width for the neural ensemble
    for sweep in ("M", "m"):
        vv = [r for r in rows if r["algo"] == "neural-viper"]
        if len({r[sweep] for r in vv}) > 1:
            series = {}
            for K in sorted({r["K"] for r in vv}, key=int):
                kr = [r for r in vv if r["K"] == K]
                # best other settings per sweep value
                series[f"K={K}"] = _sweep_series(kr, sweep, metric)
            path = out_dir / f"{metric}_vs_{sweep}.svg"
            _atomic_write(path, svg_lines(series, f"neural-viper, {metric} vs {sweep}", sweep, metric))
            paths.append(path)
    return paths


def timing_plots(rows, out_dir):
    """Median selection latency against K (one line per algorithm and width)
    and against m (one line per algorithm and K)."""
    rows = [r for r in rows if _float(r.get("select_us_median")) is not None]
    if not rows:
        return []
    paths = []
    for x_key, other in (("K", "m"), ("m", "K")):
        series = {}
        for algo in sorted({r["algo"] for r in rows}):
            for o in sorted({r[other] for r in rows}, key=float):
                sel = [r for r in rows if r["algo"] == algo and r[other] == o]
                if sel:
                    series[f"{algo} {other}={o}"] = _series(sel, x_key, "select_us_median")
        path = Path(out_dir) / f"latency_vs_{x_key}.svg"
        _atomic_write(path, svg_lines(series, f"action selection latency vs {x_key}", x_key, "median us"))
        paths.append(path)
    return paths


def _sweep_series(rows, sweep, metric):
    groups = {}
    for r in rows:
        groups.setdefault(r[sweep], {}).setdefault((r["m"], r["M"], r["sigma"], r["beta"]), []).append(
            float(r[metric]))
    xs, ms, ss = [], [], []
    for x in sorted(groups, key=float):
        vals = min(groups[x].values(), key=lambda v: np.mean(v))
        xs.append(float(x))
        ms.append(float(np.mean(vals)))
        ss.append(float(np.std(vals)))
    return xs, ms, ss


# --- law tests ---------------------------------------------------------------------


def run_law_tests(cfg):
    """Gaussian-law and anti-concentration checks; returns (csv text, report lines)."""
    lines, rows = [], []
    for seed in cfg.seeds:
        rng = np.random.default_rng(_derived_seed(seed, 41))
        for K in cfg.K:
            X = rng.standard_normal((K, cfg.dim))
            y = rng.standard_normal(K)
            for lam in cfg.lam:
                for sigma in cfg.sigma:
                    rep = ev.gaussian_law_test(X, y, lam, sigma, n_draws=cfg.n_draws, seed=seed)
                    lines += [f"gaussian-law K={K} lam={lam:g} seed={seed}: " + "; ".join(rep.lines())]
                    rows.append(("gaussian-law", K, lam, sigma, seed, rep.cov_rel_err, rep.cov_tol, rep.passed))
                    acc = CovarianceAccumulator(cfg.dim, lam).update_many(X)
                    g = rng.standard_normal(cfg.dim)
                    ac = ev.anti_concentration_test(acc, g, sigma if sigma > 0 else 1.0,
                                                    n_draws=cfg.n_draws, seed=seed)
                    lines += [f"anti-concentration K={K} lam={lam:g} seed={seed}: " + "; ".join(ac.lines())]
                    rows.append(("anti-concentration", K, lam, sigma, seed, abs(ac.shift_freq - ac.expected),
                                 0.01, ac.passed))
    buf = io.StringIO()
    buf.write("test,K,lam,sigma,seed,statistic,tolerance,passed\n")
    for r in rows:
        buf.write(",".join(str(int(v)) if isinstance(v, bool) else str(ev._fmt(v)) for v in r) + "\n")
    return buf.getvalue(), lines


# --- stages --------------------------------------------------------------------------


def _load_store(cfg):
    if cfg.kind == "bandit-mnist":
        return ingest.load_idx(cfg.mnist_images, cfg.mnist_labels)
    return None


def _collect(cfg, workers, fn):
    cl = cells(cfg)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, cl))
    return [fn(c) for c in cl]


def cmd_run(cfg, out, workers):
    out = Path(out)
    if cfg.kind == "law-tests":
        text, lines = run_law_tests(cfg)
        _atomic_write(out / "law_tests.csv", text)
        _atomic_write(out / "law_tests.txt", "\n".join(lines) + "\n")
        _atomic_write(out / "manifest.json", _manifest(cfg, text, []))
        print("\n".join(lines))
        return EXIT_OK
    store = _load_store(cfg)
    latencies = {}

    def one(cell):
        rows, fails = run_cell(cfg, cell, store, latencies)
        _atomic_write(out / "cells" / f"{cell.name}.csv", ev.reports_to_csv(rows))
        return rows, fails

    results = _collect(cfg, workers, one)
    rows = [r for rs, _ in results for r in rs]
    failures = [f for _, fs in results for f in fs]
    text = ev.reports_to_csv(rows)
    _atomic_write(out / "results.csv", text)
    if latencies:
        _atomic_write(out / "latency.csv", _latency_text(latencies))
    plots = []
    if rows:
        dict_rows = list(csv.DictReader(io.StringIO(text)))
        plots = plot_results(dict_rows, out / "plots")
        if cfg.kind == "timing":
            plots += timing_plots(dict_rows, out / "plots")
    _atomic_write(out / "manifest.json", _manifest(cfg, text, failures,
                                                    {"plots": [p.name for p in plots]}))
    for f in failures:
        print(f"failed: {f['cell']} {f['variant']}: {f['error']}", file=sys.stderr)
    print(f"wrote {len(rows)} rows to {out / 'results.csv'}")
    return EXIT_RUNTIME if failures else EXIT_OK


def _latency_text(latencies):
    rows = {f"{c}/{v}": lat for (c, v), lat in sorted(latencies.items())}
    return ev.latency_csv(rows)


def cmd_gen_data(cfg, out, workers):
    out = Path(out)
    store = _load_store(cfg)

    def one(cell):
        env = make_env(cfg, cell, store)
        ds = make_data(cfg, cell, env)
        (out / "data").mkdir(parents=True, exist_ok=True)
        save_dataset(ds, out / "data" / f"{cell.name}.tsv")
        return cell.name

    names = _collect(cfg, workers, one)
    print(f"wrote {len(names)} datasets to {out / 'data'}")
    return EXIT_OK


def _require(path, stage):
    if not Path(path).exists():
        raise StageError(f"{stage}: missing upstream artifact {path}")
    return path


class StageError(ViperError):
    pass


def cmd_fit(cfg, out, workers):
    out = Path(out)
    store = _load_store(cfg)
    index = []

    def one(cell):
        ds = load_dataset(_require(out / "data" / f"{cell.name}.tsv", "fit"))
        env = make_env(cfg, cell, store)
        featurizer = featurizer_for(env)
        recs, fails = [], []
        for var in variants(cfg):
            try:
                pol, fit_ms = _timed_fit(cfg, cell, ds, featurizer, var)
            except (ViperError, FloatingPointError, np.linalg.LinAlgError) as exc:
                fails.append({"cell": cell.name, "variant": var.name, "error": str(exc)})
                continue
            (out / "policies").mkdir(parents=True, exist_ok=True)
            alg.save_policy(pol, out / "policies" / f"{cell.name}__{var.name}.npz")
            recs.append((cell.name, var.name, fit_ms))
        return recs, fails

    results = _collect(cfg, workers, one)
    failures = [f for _, fs in results for f in fs]
    for recs, _ in results:
        index.extend(recs)
    text = "cell,variant,fit_ms\n" + "".join(f"{c},{v},{t:.3f}\n" for c, v, t in index)
    _atomic_write(out / "policies" / "index.csv", text)
    print(f"wrote {len(index)} policies to {out / 'policies'}")
    return EXIT_RUNTIME if failures else EXIT_OK


def cmd_eval(cfg, out, workers):
    out = Path(out)
    store = _load_store(cfg)
    idx_path = _require(out / "policies" / "index.csv", "eval")
    fit_ms = {(r["cell"], r["variant"]): float(r["fit_ms"]) for r in read_results(idx_path)}
    failures = []

    def one(cell):
        env = make_env(cfg, cell, store)
        rows = []
        for var in variants(cfg):
            key = (cell.name, var.name)
            if key not in fit_ms:
                failures.append({"cell": cell.name, "variant": var.name, "error": "no fitted policy"})
                continue
            pol = alg.load_policy(out / "policies" / f"{cell.name}__{var.name}.npz", store)
            sub, se = evaluate(cfg, cell, env, pol)
            rows.append(_report(cfg, cell, var, sub, se, fit_ms[key]))
        return rows

    rows = [r for rs in _collect(cfg, workers, one) for r in rs]
    text = ev.reports_to_csv(rows)
    _atomic_write(out / "results.csv", text)
    _atomic_write(out / "manifest.json", _manifest(cfg, text, failures))
    print(f"wrote {len(rows)} rows to {out / 'results.csv'}")
    return EXIT_RUNTIME if failures else EXIT_OK


def cmd_bench_timing(cfg, out, workers):
    """Latency of every variant on every cell; writes the per-sample latency CSV."""
    out = Path(out)
    store = _load_store(cfg)
    latencies, rows = {}, []
    for cell in cells(cfg):
        env = make_env(cfg, cell, store)
        featurizer = featurizer_for(env)
        ds = make_data(cfg, cell, env)
        states = list(ev.eval_states(env, cfg.timing_states, seed=cell.seed + 7919)) \
            if not isinstance(env, envs.LinearMdpSpec) else [s % 2 for s in range(cfg.timing_states)]
        for var in variants(cfg):
            pol, fms = _timed_fit(cfg, cell, ds, featurizer, var)
            lat = ev.timing_benchmark({var.name: pol}, states, warmup=cfg.warmup)[var.name]
            latencies[(cell.name, var.name)] = lat
            sub, se = evaluate(cfg, cell, env, pol)
            rows.append(_report(cfg, cell, var, sub, se, fms, lat))
    _atomic_write(out / "latency.csv", _latency_text(latencies))
    _atomic_write(out / "timing.csv", ev.reports_to_csv(rows))
    print(f"wrote {len(latencies)} latency series to {out / 'latency.csv'}")
    return EXIT_OK


def cmd_plot(csv_path, out, x_key, metric):
    path = Path(csv_path)
    if not path.exists():
        raise StageError(f"plot: missing CSV {path}")
    paths = plot_results(read_results(path), out, x_key=x_key, metric=metric)
    for p in paths:
        print(p)
    return EXIT_OK


# --- entry point --------------------------------------------------------------------


def _parser():
    ap = argparse.ArgumentParser(prog="viper-bench", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="cmd", required=True)
    for name in ("run", "gen-data", "fit", "eval", "bench-timing"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="flat key = value config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--workers", type=int, default=None,
                       help=f"worker threads (the {WORKERS_ENV} environment variable takes precedence)")
        p.add_argument("--seed-offset", type=int, default=0, help="added to every seed")
    p = sub.add_parser("plot")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--x", default="K", help="column for the horizontal axis")
    p.add_argument("--metric", default="subopt")
    sub.add_parser("keys", help="print the config schema")
    return ap


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        if args.cmd == "keys":
            for key, (typ, default, desc) in SCHEMA.items():
                d = default if not isinstance(default, dict) else "; ".join(f"{k}: {v}" for k, v in default.items())
                print(f"{key:15s} {typ:10s} {desc} [default {d}]")
            return EXIT_OK
        if args.cmd == "plot":
            return cmd_plot(args.csv, args.out, args.x, args.metric)
        cfg = load_config(args.config)
        if args.seed_offset:
            cfg.values["seeds"] = [s + args.seed_offset for s in cfg.values["seeds"]]
        workers = resolve_workers(args.workers)
        stage = {"run": cmd_run, "gen-data": cmd_gen_data, "fit": cmd_fit, "eval": cmd_eval,
                 "bench-timing": cmd_bench_timing}[args.cmd]
        return stage(cfg, args.out, workers)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ViperError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
