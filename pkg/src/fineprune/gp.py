"""Exact Gaussian-process regression with a squared-exponential ARD kernel.

The prior mean is the constant ``mean(y)``.  Posterior queries go through a
cached Cholesky factor of ``K + noise*I``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .errors import ConditioningError, NumericError

JITTER_FLOOR = 1e-10
JITTER_MAX = 1e-4
# posterior variances below this are numerical residue of the noise floor
VARIANCE_FLOOR = 1e-9

GRID_LENGTHSCALES = (0.1, 0.2, 0.5, 1.0, 2.0)
GRID_SIGNAL = (0.25, 1.0, 4.0)
GRID_NOISE = (1e-6, 1e-4, 1e-2)


@dataclass(frozen=True)
class KernelHyper:
    signal: float = 1.0
    lengthscales: tuple[float, ...] | float = 1.0
    noise: float = JITTER_FLOOR

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=np.float64))
        if self.signal <= 0 or np.any(ls <= 0) or self.noise < 0:
            raise ValueError(f"invalid kernel hyperparameters {self}")

    def scales(self, d: int) -> np.ndarray:
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=np.float64))
        if ls.size == 1:
            return np.full(d, ls[0])
        if ls.size != d:
            raise ValueError(f"{ls.size} length scales for {d}-dimensional inputs")
        return ls


def kernel_matrix(A: np.ndarray, B: np.ndarray, hyper: KernelHyper) -> np.ndarray:
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    ls = hyper.scales(A.shape[1])
    a, b = A / ls, B / ls
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return hyper.signal * np.exp(-0.5 * np.maximum(sq, 0.0))


def kernel(x, x2, hyper: KernelHyper) -> float:
    x = np.asarray(x, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if x.shape != x2.shape or x.ndim != 1:
        raise ValueError(f"dimension mismatch: {x.shape} vs {x2.shape}")
    diff = (x - x2) / hyper.scales(len(x))
    return float(hyper.signal * np.exp(-0.5 * diff @ diff))


@dataclass(frozen=True)
class GPModel:
    X: np.ndarray
    y: np.ndarray
    hyper: KernelHyper
    mean: float
    dim: int
    chol: np.ndarray | None  # lower factor of K + noise*I
    alpha: np.ndarray | None  # (K + noise*I)^-1 (y - mean)
    noise: float  # noise actually used, after jitter escalation

    @property
    def n(self) -> int:
        return len(self.y)

    def log_marginal_likelihood(self) -> float:
        if self.n == 0:
            return 0.0
        r = self.y - self.mean
        return float(-0.5 * r @ self.alpha - np.log(np.diag(self.chol)).sum()
                     - 0.5 * self.n * np.log(2 * np.pi))


def dedup(X: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Collapse identical rows of X, averaging their targets (first-seen order)."""
    if len(X) == 0:
        return X, y
    _, first, inverse = np.unique(X, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.ravel()
    sums = np.bincount(inverse, weights=y)
    counts = np.bincount(inverse)
    order = np.argsort(first)
    return X[first[order]], (sums / counts)[order]


def _factorize(K: np.ndarray, noise: float) -> tuple[np.ndarray, float]:
    noise = max(noise, JITTER_FLOOR)
    n = len(K)
    while True:
        try:
            return np.linalg.cholesky(K + noise * np.eye(n)), noise
        except np.linalg.LinAlgError:
            if noise >= JITTER_MAX:
                raise ConditioningError(
                    f"kernel matrix not positive definite even with noise {noise:g}"
                ) from None
            noise = min(noise * 10.0, JITTER_MAX)


def _fit_fixed(X, y, hyper: KernelHyper, dim: int) -> GPModel:
    if len(y) == 0:
        return GPModel(X, y, hyper, 0.0, dim, None, None, max(hyper.noise, JITTER_FLOOR))
    hyper.scales(dim)
    mean = float(y.mean())
    L, noise = _factorize(kernel_matrix(X, X, hyper), hyper.noise)
    alpha = cho_solve((L, True), y - mean)
    return GPModel(X, y, hyper, mean, dim, L, alpha, noise)


def hyper_grid(dim: int):
    """Candidate hyperparameters for ``hyper="auto"``: a shared length scale across
    dimensions, crossed with signal and noise levels, in a fixed order."""
    for ls, sf, sn in itertools.product(GRID_LENGTHSCALES, GRID_SIGNAL, GRID_NOISE):
        yield KernelHyper(signal=sf, lengthscales=ls, noise=sn)


def fit(X, y, hyper: KernelHyper | str = "auto", dim: int | None = None) -> GPModel:
    """Fit a GP to observations ``(X, y)``.

    ``hyper="auto"`` picks the grid point with the largest log marginal
    likelihood (first one wins ties).  ``dim`` is only needed when X is empty.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.ndim == 1:
        X = X.reshape(len(y), -1) if len(y) else X.reshape(0, dim or 0)
    if len(X) != len(y):
        raise ValueError(f"{len(X)} rows but {len(y)} targets")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise NumericError("non-finite GP training data")
    d = X.shape[1] if len(X) else dim
    if d is None or d < 1:
        raise ValueError("input dimension unknown")
    X, y = dedup(X, y)
    if not isinstance(hyper, str):
        return _fit_fixed(X, y, hyper, d)
    if hyper != "auto":
        raise ValueError(f"unknown hyperparameter mode {hyper!r}")
    if len(y) == 0:
        return _fit_fixed(X, y, KernelHyper(), d)
    best, best_lml = None, -np.inf
    for h in hyper_grid(d):
        try:
            model = _fit_fixed(X, y, h, d)
        except ConditioningError:
            continue
        lml = model.log_marginal_likelihood()
        if lml > best_lml:
            best, best_lml = model, lml
    if best is None:
        raise ConditioningError("no grid hyperparameters gave a usable factorization")
    return best


def posterior(model: GPModel, xq) -> tuple[np.ndarray, np.ndarray] | tuple[float, float]:
    """Posterior mean and variance at one point (floats) or at rows of a matrix."""
    xq = np.asarray(xq, dtype=np.float64)
    single = xq.ndim == 1
    Q = xq.reshape(1, -1) if single else xq
    if Q.shape[1] != model.dim:
        raise ValueError(f"query has dimension {Q.shape[1]}, model has {model.dim}")
    prior = np.full(len(Q), model.hyper.signal)
    if model.n == 0:
        mu, var = np.full(len(Q), model.mean), prior
    else:
        Ks = kernel_matrix(Q, model.X, model.hyper)
        mu = model.mean + Ks @ model.alpha
        v = solve_triangular(model.chol, Ks.T, lower=True)
        var = prior - (v * v).sum(axis=0)
        if var.min() < -1e-8:
            raise ConditioningError(f"posterior variance {var.min():g} is materially negative")
        var = np.where(var < VARIANCE_FLOOR, 0.0, var)
    if single:
        return float(mu[0]), float(var[0])
    return mu, var
