"""Slow, independent reference computations used to cross-check the fast paths.

Nothing here shares code with the routines it checks: the GP oracle inverts
the kernel matrix by Gauss-Jordan elimination with explicit loops, EI is
estimated by Monte Carlo, and gradients come from central differences on a
separately written forward pass.
"""

from __future__ import annotations

import math

import numpy as np


def se_ard(x, y, signal, lengthscales):
    total = 0.0
    for xi, yi, li in zip(x, y, lengthscales):
        total += ((xi - yi) / li) ** 2
    return signal * math.exp(-0.5 * total)


def gauss_jordan_inverse(A):
    """Inverse by Gauss-Jordan elimination with partial pivoting."""
    n = len(A)
    M = [list(map(float, A[i])) + [1.0 if i == j else 0.0 for j in range(n)] for i in range(n)]
    for col in range(n):
        piv = max(range(col, n), key=lambda r: abs(M[r][col]))
        if M[piv][col] == 0.0:
            raise ZeroDivisionError("singular matrix")
        M[col], M[piv] = M[piv], M[col]
        p = M[col][col]
        M[col] = [v / p for v in M[col]]
        for r in range(n):
            if r != col and M[r][col] != 0.0:
                f = M[r][col]
                M[r] = [a - f * b for a, b in zip(M[r], M[col])]
    return np.array([row[n:] for row in M])


def gp_posterior_naive(X, y, xq, signal, lengthscales, noise):
    """Posterior mean/variance with constant mean(y) prior via an explicit inverse."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(y)
    if n == 0:
        return 0.0, signal
    K = [[se_ard(X[i], X[j], signal, lengthscales) + (noise if i == j else 0.0)
          for j in range(n)] for i in range(n)]
    Kinv = gauss_jordan_inverse(K)
    k = np.array([se_ard(xq, X[i], signal, lengthscales) for i in range(n)])
    mu0 = float(np.mean(y))
    mean = mu0 + k @ Kinv @ (y - mu0)
    var = se_ard(xq, xq, signal, lengthscales) - k @ Kinv @ k
    return float(mean), float(var)


def ei_monte_carlo(mu, sigma, l_best, samples=1_000_000, seed=0):
    g = np.random.default_rng(seed).standard_normal(samples)
    return float(np.maximum(0.0, l_best - (mu + sigma * g)).mean())


def mlp_loss(weights, biases, activations, x, labels):
    """Mean cross-entropy of a dense network given effective weights (out, in)."""
    a = np.asarray(x, dtype=float)
    for W, b, act in zip(weights, biases, activations):
        a = a @ np.asarray(W).T + b
        if act == "relu":
            a = np.where(a > 0, a, 0.0)
    total = 0.0
    for row, lab in zip(a, labels):
        m = max(row)
        total += -(row[lab] - m - math.log(sum(math.exp(v - m) for v in row)))
    return total / len(labels)


def central_difference(f, params, h=1e-5):
    """Central-difference gradient of scalar ``f`` w.r.t. every entry of each array
    in ``params`` (arrays are perturbed in place and restored)."""
    grads = []
    for p in params:
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = f()
            p[idx] = old - h
            down = f()
            p[idx] = old
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def relative_error(a, b, floor=1e-6):
    """Max of |a-b| / max(|a|, |b|, floor); the floor keeps near-zero gradients from
    turning roundoff into large ratios."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))
