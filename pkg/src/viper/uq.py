"""Uncertainty machinery: covariance accumulators, Gaussian posterior draws,
the ReLU neural tangent kernel and the effective dimension."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .errors import ConfigError, DomainError, NumericError

MODES = ("full", "diagonal", "lowrank")


def _cholesky(A, what="covariance"):
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"{what} factorization failed: {exc}") from None


def chol_rank_one_update(L, x):
    """Return the lower factor of ``L L^T + x x^T``."""
    L = L.copy()
    x = np.array(x, dtype=float)
    n = x.shape[0]
    for k in range(n):
        lkk = L[k, k]
        r = math.hypot(lkk, x[k])
        c, s = r / lkk, x[k] / lkk
        L[k, k] = r
        if k + 1 < n:
            L[k + 1 :, k] = (L[k + 1 :, k] + s * x[k + 1 :]) / c
            x[k + 1 :] = c * x[k + 1 :] - s * L[k + 1 :, k]
    return L


class CovarianceAccumulator:
    """Lambda = lam I + sum_k g_k g_k^T with solve, norm, logdet and sampling.

    ``mode``:
      * ``"full"``: dense Lambda; its Cholesky factor is kept current with
        rank-one updates and recomputed from Lambda every ``refresh`` updates.
      * ``"diagonal"``: only diag(Lambda) is stored.
      * ``"lowrank"``: the observed rows G are stored and all services go
        through the n x n matrix ``lam I + G G^T`` (exact; cheaper when n < dim).
    """

    def __init__(self, dim, lam, mode="full", refresh=64):
        if mode not in MODES:
            raise ConfigError(f"unknown covariance mode {mode!r}")
        if not lam > 0:
            raise ConfigError(f"lambda must be > 0, got {lam}")
        self.dim = int(dim)
        self.lam = float(lam)
        self.mode = mode
        self.refresh = int(refresh)
        self.count = 0
        self._since_refresh = 0
        if mode == "full":
            self._mat = self.lam * np.eye(self.dim)
            self._chol = math.sqrt(self.lam) * np.eye(self.dim)
        elif mode == "diagonal":
            self._diag = np.full(self.dim, self.lam)
        else:
            self._rows = np.zeros((0, self.dim))
            self._gchol = np.zeros((0, 0))

    # -- updates --

    def _check(self, g):
        g = np.asarray(g, dtype=float)
        if g.shape[-1] != self.dim:
            raise DomainError(f"vector dim {g.shape[-1]} != accumulator dim {self.dim}")
        return g

    def update(self, g):
        """Add one outer product g g^T."""
        g = self._check(g).ravel()
        self.count += 1
        if self.mode == "diagonal":
            self._diag += g * g
        elif self.mode == "full":
            self._mat += np.outer(g, g)
            self._since_refresh += 1
            if self._since_refresh >= self.refresh:
                self._refactor()
            else:
                self._chol = chol_rank_one_update(self._chol, g)
        else:
            # extend the factor of lam I + G G^T by one row
            G = self._rows
            cross = G @ g
            ell = solve_triangular(self._gchol, cross, lower=True) if G.shape[0] else cross
            d2 = self.lam + g @ g - ell @ ell
            if d2 <= 0:
                raise NumericError("low-rank factor update lost positive definiteness")
            n = G.shape[0]
            Lnew = np.zeros((n + 1, n + 1))
            Lnew[:n, :n] = self._gchol
            Lnew[n, :n] = ell
            Lnew[n, n] = math.sqrt(d2)
            self._gchol = Lnew
            self._rows = np.vstack([G, g[None, :]])
        return self

    def update_many(self, G):
        """Add every row of G, re-factoring once."""
        G = np.atleast_2d(self._check(G))
        if G.shape[0] == 0:
            return self
        self.count += G.shape[0]
        if self.mode == "diagonal":
            self._diag += np.einsum("ij,ij->j", G, G)
        elif self.mode == "full":
            self._mat += G.T @ G
            self._refactor()
        else:
            self._rows = np.vstack([self._rows, G])
            gram = self._rows @ self._rows.T
            gram[np.diag_indices_from(gram)] += self.lam
            self._gchol = _cholesky(gram, "gram")
        return self

    def _refactor(self):
        self._mat = 0.5 * (self._mat + self._mat.T)
        self._chol = _cholesky(self._mat)
        self._since_refresh = 0

    # -- queries --

    def matrix(self):
        """Dense Lambda (diagonal mode returns the diagonal matrix)."""
        if self.mode == "full":
            return self._mat.copy()
        if self.mode == "diagonal":
            return np.diag(self._diag)
        return self.lam * np.eye(self.dim) + self._rows.T @ self._rows

    def diagonal(self):
        if self.mode == "diagonal":
            return self._diag.copy()
        return np.diag(self.matrix())

    def solve(self, V):
        """Lambda^{-1} V for a vector or a batch of row vectors."""
        V = self._check(V)
        single = V.ndim == 1
        B = np.atleast_2d(V)
        if self.mode == "diagonal":
            out = B / self._diag
        elif self.mode == "full":
            out = cho_solve((self._chol, True), B.T).T
        else:
            out = self._lowrank_solve(B)
        return out[0] if single else out

    def _lowrank_solve(self, B):
        if self._rows.shape[0] == 0:
            return B / self.lam
        GB = self._rows @ B.T
        inner = cho_solve((self._gchol, True), GB)
        return (B - (self._rows.T @ inner).T) / self.lam

    def quad_form(self, V):
        """||v||_{Lambda^{-1}} = sqrt(v^T Lambda^{-1} v), row-wise for batches."""
        V = self._check(V)
        single = V.ndim == 1
        B = np.atleast_2d(V)
        if self.mode == "diagonal":
            q = np.einsum("ij,ij->i", B * B, 1.0 / self._diag[None, :])
        elif self.mode == "full":
            Z = solve_triangular(self._chol, B.T, lower=True)
            q = np.einsum("ij,ij->j", Z, Z)
        elif self._rows.shape[0] == 0:
            q = np.einsum("ij,ij->i", B, B) / self.lam
        else:
            Z = solve_triangular(self._gchol, self._rows @ B.T, lower=True)
            q = (np.einsum("ij,ij->i", B, B) - np.einsum("ij,ij->j", Z, Z)) / self.lam
        q = np.sqrt(np.maximum(q, 0.0))
        return float(q[0]) if single else q

    def logdet(self):
        if self.mode == "diagonal":
            return float(np.sum(np.log(self._diag)))
        if self.mode == "full":
            return float(2.0 * np.sum(np.log(np.diag(self._chol))))
        n = self._rows.shape[0]
        return float((self.dim - n) * math.log(self.lam) + 2.0 * np.sum(np.log(np.diag(self._gchol))))

    def sample(self, sigma, rng, size=None):
        """Draw(s) from N(0, sigma^2 Lambda^{-1})."""
        n = 1 if size is None else int(size)
        if sigma == 0:
            out = np.zeros((n, self.dim))
        elif self.mode == "diagonal":
            out = sigma * rng.standard_normal((n, self.dim)) / np.sqrt(self._diag)
        elif self.mode == "full":
            Z = rng.standard_normal((self.dim, n))
            out = sigma * solve_triangular(self._chol, Z, lower=True, trans="T").T
        else:
            # Lambda^{-1}(sqrt(lam) z1 + G^T z2) has covariance Lambda^{-1}
            z1 = rng.standard_normal((n, self.dim))
            z2 = rng.standard_normal((n, self._rows.shape[0]))
            out = sigma * self._lowrank_solve(math.sqrt(self.lam) * z1 + z2 @ self._rows)
        return out[0] if size is None else out


def cov_update(acc, g):
    return acc.update(g)


def quad_form(acc, v):
    return acc.quad_form(v)


def sample_perturbation(acc, sigma, rng, size=None):
    return acc.sample(sigma, rng, size=size)


# --- neural tangent kernel ---------------------------------------------------


def ntk_closed_form(x, xp):
    """E_w <x 1{w.x>0}, x' 1{w.x'>0}> = u (pi - arccos u) / (2 pi), u = x.x'."""
    u = np.clip(np.sum(np.asarray(x, float) * np.asarray(xp, float), axis=-1), -1.0, 1.0)
    return u * (np.pi - np.arccos(u)) / (2.0 * np.pi)


def ntk_gram(X):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    U = np.clip(X @ X.T, -1.0, 1.0)
    G = U * (np.pi - np.arccos(U)) / (2.0 * np.pi)
    return 0.5 * (G + G.T)


def empirical_ntk(params, x, xp):
    """<g(x; W0), g(x'; W0)> computed from the gate factors."""
    W0, b = params.W0, params.b
    x = np.asarray(x, dtype=float)
    xp = np.asarray(xp, dtype=float)
    if x.shape[-1] != W0.shape[1] or xp.shape[-1] != W0.shape[1]:
        raise DomainError("input dimension does not match the network")
    gx = (W0 @ x > 0) * b
    gxp = (W0 @ xp > 0) * b
    return float(gx @ gxp) / W0.shape[0] * float(x @ xp)


def empirical_ntk_gram(params, X):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    C = (X @ params.W0.T > 0) * params.b
    return (C @ C.T) / params.W0.shape[0] * (X @ X.T)


def effective_dimension(gram, lam, Kprime=None):
    """logdet(I + gram / lam) / log(1 + K' / lam); K' defaults to the Gram size."""
    gram = np.asarray(gram, dtype=float)
    n = gram.shape[0]
    Kprime = n if Kprime is None else int(Kprime)
    if gram.shape != (n, n) or not np.allclose(gram, gram.T, atol=1e-10):
        raise NumericError("Gram matrix must be square and symmetric")
    eig = np.linalg.eigvalsh(gram) if n else np.zeros(0)
    if n and eig[0] < -1e-10 * max(1.0, np.abs(gram).max()):
        raise NumericError("Gram matrix is not positive semidefinite")
    logdet = math.fsum(np.log1p(np.maximum(eig, 0.0) / lam))
    return float(logdet / math.log1p(Kprime / lam))


def normal_cdf(x):
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def ensemble_size(delta, H, S, A):
    """Smallest integer M >= 1 with M >= log(HSA/delta) / log(1/(1 - Phi(-1)))."""
    hsa = float(H) * float(S) * float(A)
    if not (0 < delta <= hsa):
        raise ConfigError(f"delta must lie in (0, H*S*A={hsa:g}], got {delta}")
    ratio = math.log(hsa / delta) / -math.log1p(-normal_cdf(-1.0))
    return max(1, math.ceil(ratio - 1e-12))


# --- export -----------------------------------------------------------------


def save_matrix(path, M):
    """One matrix row per line, tab-separated, 17 significant digits."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    lines = [f"# matrix rows={M.shape[0]} cols={M.shape[1]}"]
    lines += ["\t".join(f"{v:.17g}" for v in row) for row in M]
    Path(path).write_text("\n".join(lines) + "\n")


def load_matrix(path):
    rows = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    return np.array([[float(v) for v in ln.split("\t")] for ln in rows])
