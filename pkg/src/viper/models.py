"""Linear and two-layer ReLU value models, and full-batch gradient descent on
the perturbed regularized squared loss

    L(W) = 1/2 sum_k (f(x_k; W) - y_k)^2 + lam/2 ||W + zeta - W0||^2.

Network parameters are stored as an (m, d) matrix whose row ``i`` is the
hidden weight vector ``w_i``; flattened vectors use row-major order.
"""

from __future__ import annotations

import struct
import sys
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError, FormatError, NumericError


@dataclass(frozen=True)
class NetParams:
    W: np.ndarray
    b: np.ndarray
    W0: np.ndarray

    @property
    def width(self):
        return self.W.shape[0]

    @property
    def in_dim(self):
        return self.W.shape[1]

    def with_weights(self, W):
        return replace(self, W=np.asarray(W, dtype=float).reshape(self.W0.shape))


@dataclass(frozen=True)
class LinearParams:
    theta: np.ndarray

    @property
    def dim(self):
        return self.theta.shape[0]


@dataclass(frozen=True)
class GdConfig:
    lam: float = 0.01
    eta: float = 0.01
    J: int = 1000

    def __post_init__(self):
        if not self.lam > 0:
            raise ConfigError(f"lambda must be > 0, got {self.lam}")
        if not self.eta > 0:
            raise ConfigError(f"eta must be > 0, got {self.eta}")
        if int(self.J) < 0:
            raise ConfigError(f"J must be >= 0, got {self.J}")


def symmetric_init(m, d, seed=0):
    """Paired initialization: w_i = w_{m/2+i} ~ N(0, I/d), b_{m/2+i} = -b_i.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    m, d = int(m), int(d)
    if m < 2 or m % 2:
        raise ConfigError(f"width m must be even and >= 2, got {m}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    half = rng.standard_normal((m // 2, d)) / np.sqrt(d)
    signs = rng.choice([-1.0, 1.0], size=m // 2)
    W = np.vstack([half, half])
    b = np.concatenate([signs, -signs])
    return NetParams(W=W, b=b, W0=W.copy())


def _as_batch(x, d):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[-1] != d:
        raise DomainError(f"input dim {X.shape[-1]} != model dim {d}")
    return X, single


def _check_unit(X):
    n = np.linalg.norm(X, axis=-1)
    if np.any(np.abs(n - 1.0) > 1e-6):
        warnings.warn("network input is not on the unit sphere", stacklevel=3)


def net_forward(W, b, X):
    """f(x; W) = (1/sqrt m) sum_i b_i relu(w_i . x) for each row of X."""
    pre = X @ W.T
    return np.maximum(pre, 0.0) @ b / np.sqrt(W.shape[0])


def forward(params, x, check_unit=True):
    X, single = _as_batch(x, params.in_dim)
    if check_unit:
        _check_unit(X)
    out = net_forward(params.W, params.b, X)
    return float(out[0]) if single else out


def _gates(W, b, X):
    # (n, m): b_i 1{w_i . x > 0} / sqrt m ; the subgradient at 0 is taken as 0
    return (X @ W.T > 0) * (b / np.sqrt(W.shape[0]))


def grad(params, x):
    """g(x; W) flattened to length m*d (or shape (n, m*d) for a batch)."""
    X, single = _as_batch(x, params.in_dim)
    c = _gates(params.W, params.b, X)
    G = (c[:, :, None] * X[:, None, :]).reshape(X.shape[0], -1)
    return G[0] if single else G


def grad_factors(params, X, at_init=False):
    """Kronecker factors of the gradient: g(x) = c(x) (outer) x, returns c."""
    W = params.W0 if at_init else params.W
    return _gates(W, params.b, np.atleast_2d(X))


def init_gradient_features(params, X):
    """Linearized-network features g(x; W0)."""
    return grad(replace(params, W=params.W0), X)


def linear_forward(theta, feats):
    theta = np.asarray(theta, dtype=float)
    feats = np.asarray(feats, dtype=float)
    if feats.shape[-1] != theta.shape[0]:
        raise DomainError(f"feature dim {feats.shape[-1]} != parameter dim {theta.shape[0]}")
    return feats @ theta


# --- models behind gradient_descent ---------------------------------------


class LinearModel:
    """f(x; theta) = <x, theta>."""

    def predict(self, w, X):
        return X @ w

    def pullback(self, w, X, resid):
        return X.T @ resid


class NetModel:
    """Two-layer ReLU network with frozen output signs ``b``."""

    def __init__(self, b):
        self.b = np.asarray(b, dtype=float)
        self._scale = 1.0 / np.sqrt(self.b.shape[0])

    def predict(self, W, X):
        return net_forward(W, self.b, X)

    def pullback(self, W, X, resid):
        # sum_k resid_k g(x_k; W), shaped like W
        act = (X @ W.T > 0).astype(float)
        return ((resid[:, None] * act) * (self.b * self._scale)).T @ X


@dataclass
class GdResult:
    params: np.ndarray
    loss: float
    losses: list = field(default_factory=list)


def perturbed_loss(model, w, X, y, lam, zeta, w0):
    r = model.predict(w, X) - y
    reg = w + zeta - w0
    return 0.5 * float(r @ r) + 0.5 * lam * float(np.sum(reg * reg))


def gradient_descent(model, gd, X, y, zeta=None, w0=None, record=False):
    """Run exactly ``gd.J`` full-batch steps from ``w0`` and return W_J.

    ``zeta`` (default 0) has the full parameter shape. A non-finite loss
    raises :class:`NumericError` carrying the iteration index.
    """
    if not isinstance(X, BlockInputs):
        X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.shape[0] == 0:
        raise DomainError("gradient descent needs at least one record")
    if X.shape[0] != y.shape[0]:
        raise DomainError(f"{X.shape[0]} inputs but {y.shape[0]} targets")
    w0 = np.asarray(w0, dtype=float)
    shift = w0 if zeta is None else w0 - np.asarray(zeta, dtype=float).reshape(w0.shape)
    lam, eta = gd.lam, gd.eta
    w = w0.copy()
    losses = []
    with np.errstate(over="ignore", invalid="ignore"):
        return _gd_loop(model, X, y, w, shift, lam, eta, int(gd.J), record, losses)


def _gd_loop(model, X, y, w, shift, lam, eta, J, record, losses):
    # overflow is reported as NumericError through the loss check
    for j in range(J):
        r = model.predict(w, X) - y
        loss = 0.5 * float(r @ r) + 0.5 * lam * float(np.sum((w - shift) ** 2))
        if not np.isfinite(loss):
            raise NumericError("gradient descent diverged", iteration=j)
        if record:
            losses.append(loss)
        w = w - eta * (model.pullback(w, X, r) + lam * (w - shift))
    r = model.predict(w, X) - y
    loss = 0.5 * float(r @ r) + 0.5 * lam * float(np.sum((w - shift) ** 2))
    if not np.isfinite(loss):
        raise NumericError("gradient descent diverged", iteration=J)
    if record:
        losses.append(loss)
    return GdResult(w, loss, losses)


def safe_step_size(X, lam):
    """1 / (lam + lambda_max(X^T X)).

    Also a safe step for the network: its gradient Gram matrix is a Schur
    product bounded by X X^T.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    top = np.linalg.norm(X, 2) ** 2 if X.size else 0.0
    return 1.0 / (lam + top)


def ridge_solution(X, y, lam, zeta=None):
    """argmin 1/2||X w - y||^2 + lam/2 ||w + zeta||^2 in closed form."""
    X = np.asarray(X, dtype=float)
    d = X.shape[1]
    rhs = X.T @ np.asarray(y, dtype=float)
    if zeta is not None:
        rhs = rhs - lam * np.asarray(zeta, dtype=float)
    return np.linalg.solve(X.T @ X + lam * np.eye(d), rhs)


# --- checkpoints ------------------------------------------------------------
#
# b"VPNP" | endianness tag (b"<" or b">") | u32 m | u32 d | W (m*d f64) |
# b (m f64) | W0 (m*d f64), all row-major in the tagged byte order.

_MAGIC = b"VPNP"


def params_to_bytes(params):
    tag = b"<" if sys.byteorder == "little" else b">"
    m, d = params.W.shape
    head = _MAGIC + tag + struct.pack(tag.decode() + "II", m, d)
    body = np.concatenate([params.W.ravel(), params.b, params.W0.ravel()]).astype(float)
    return head + body.tobytes()


def params_from_bytes(buf, path=None):
    if buf[:4] != _MAGIC:
        raise FormatError("bad checkpoint magic", path=path, offset=0)
    tag = buf[4:5].decode()
    if tag not in "<>":
        raise FormatError(f"bad endianness tag {tag!r}", path=path, offset=4)
    m, d = struct.unpack(tag + "II", buf[5:13])
    n = 2 * m * d + m
    need = 13 + 8 * n
    if len(buf) < need:
        raise FormatError(f"truncated checkpoint, need {need} bytes", path=path, offset=len(buf))
    vals = np.frombuffer(buf, dtype=np.dtype(tag + "f8"), count=n, offset=13).astype(float)
    W = vals[: m * d].reshape(m, d)
    b = vals[m * d : m * d + m]
    W0 = vals[m * d + m :].reshape(m, d)
    return NetParams(W=W, b=b, W0=W0)


def save_params(params, path):
    Path(path).write_bytes(params_to_bytes(params))


def load_params(path):
    return params_from_bytes(Path(path).read_bytes(), path=path)


# --- experiment-mode network ------------------------------------------------


class DeepReluNet:
    """Two hidden ReLU layers trained with Adam (experiment mode only).

    Mirrors the architecture used for the neural bandit experiments; it is not
    covered by the NTK analysis and uses the regularizer around its own init.
    """

    def __init__(self, d, width=64, seed=0):
        rng = np.random.default_rng(seed)
        self.shapes = [(width, d), (width, width), (width,)]
        self.params0 = [rng.standard_normal(s) * np.sqrt(2.0 / s[-1]) for s in self.shapes[:2]]
        self.params0.append(rng.standard_normal(width) / np.sqrt(width))

    @staticmethod
    def predict(params, X):
        W1, W2, v = params
        h1 = np.maximum(X @ W1.T, 0.0)
        h2 = np.maximum(h1 @ W2.T, 0.0)
        return h2 @ v

    @staticmethod
    def _grads(params, X, resid):
        W1, W2, v = params
        z1 = X @ W1.T
        h1 = np.maximum(z1, 0.0)
        z2 = h1 @ W2.T
        h2 = np.maximum(z2, 0.0)
        gv = h2.T @ resid
        d2 = (resid[:, None] * v[None, :]) * (z2 > 0)
        gW2 = d2.T @ h1
        d1 = (d2 @ W2) * (z1 > 0)
        gW1 = d1.T @ X
        return [gW1, gW2, gv]

    def fit(self, X, y, lam=0.01, zeta=None, lr=1e-3, epochs=100, batch=64, seed=0):
        """Adam on the perturbed loss; ``zeta`` is a list shaped like the parameters."""
        rng = np.random.default_rng(seed)
        params = [p.copy() for p in self.params0]
        anchor = [p0 - (0 if zeta is None else z) for p0, z in
                  zip(self.params0, zeta if zeta is not None else [None] * 3)]
        m = [np.zeros_like(p) for p in params]
        v = [np.zeros_like(p) for p in params]
        b1, b2, eps, t = 0.9, 0.999, 1e-8, 0
        n = X.shape[0]
        for _ in range(int(epochs)):
            order = rng.permutation(n)
            for start in range(0, n, batch):
                idx = order[start : start + batch]
                resid = self.predict(params, X[idx]) - y[idx]
                # the regularizer is spread evenly over mini-batches
                frac = len(idx) / n
                gs = self._grads(params, X[idx], resid)
                t += 1
                for i, g in enumerate(gs):
                    g = g + lam * frac * (params[i] - anchor[i])
                    m[i] = b1 * m[i] + (1 - b1) * g
                    v[i] = b2 * v[i] + (1 - b2) * g * g
                    mh = m[i] / (1 - b1**t)
                    vh = v[i] / (1 - b2**t)
                    params[i] = params[i] - lr * mh / (np.sqrt(vh) + eps)
            if not all(np.all(np.isfinite(p)) for p in params):
                raise NumericError("Adam diverged", iteration=t)
        return params


# --- block-embedded inputs ----------------------------------------------------


class BlockInputs:
    """Block action embeddings kept in factored form.

    Row k stands for the vector with ``states[k]`` in block ``actions[k]`` of
    an ``n_actions * d`` input and zeros elsewhere.
    """

    def __init__(self, states, actions, n_actions):
        self.states = np.asarray(states, dtype=float)
        self.actions = np.asarray(actions, dtype=np.int64)
        self.n_actions = int(n_actions)
        self.groups = [np.flatnonzero(self.actions == a) for a in range(self.n_actions)]
        self.shape = (self.states.shape[0], self.n_actions * self.states.shape[1])

    def dense(self):
        n, d = self.states.shape
        X = np.zeros((n, self.n_actions, d))
        X[np.arange(n), self.actions] = self.states
        return X.reshape(n, -1)


class BlockNetModel(NetModel):
    """NetModel evaluated on :class:`BlockInputs`, touching only the active block."""

    def predict(self, W, X):
        m = W.shape[0]
        Wb = W.reshape(m, X.n_actions, -1)
        out = np.empty(X.states.shape[0])
        for a, idx in enumerate(X.groups):
            if idx.size:
                pre = X.states[idx] @ Wb[:, a, :].T
                out[idx] = np.maximum(pre, 0.0) @ self.b * self._scale
        return out

    def pullback(self, W, X, resid):
        m = W.shape[0]
        Wb = W.reshape(m, X.n_actions, -1)
        G = np.zeros_like(Wb)
        coef = self.b * self._scale
        for a, idx in enumerate(X.groups):
            if idx.size:
                S = X.states[idx]
                act = (S @ Wb[:, a, :].T > 0)
                G[:, a, :] = ((resid[idx, None] * act) * coef).T @ S
        return G.reshape(W.shape)
