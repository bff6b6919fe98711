"""Quick numerical self-checks behind ``fineprune selftest``."""

from __future__ import annotations

import numpy as np

from . import bo, gp, nnet, oracles


def check_gp(seed: int, instances: int = 10) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        d, n = int(rng.integers(1, 5)), int(rng.integers(1, 11))
        X, y = rng.random((n, d)), rng.standard_normal(n)
        hyper = gp.KernelHyper(signal=float(rng.uniform(0.5, 2)),
                               lengthscales=tuple(rng.uniform(0.3, 1.5, d)), noise=1e-4)
        model = gp.fit(X, y, hyper)
        for xq in rng.random((3, d)):
            mu, var = gp.posterior(model, xq)
            mu_o, var_o = oracles.gp_posterior_naive(X, y, xq, hyper.signal, hyper.scales(d),
                                                     model.noise)
            worst = max(worst, abs(mu - mu_o), abs(var - var_o))
    return worst


def check_ei(seed: int, triples: int = 5) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(triples):
        mu, sigma, best = rng.normal(), rng.uniform(0.1, 2.0), rng.normal()
        ei = bo.ei_from_moments(mu, sigma, best)
        worst = max(worst, abs(ei - oracles.ei_monte_carlo(mu, sigma, best, 200_000, seed + i)))
    return worst


def check_gradients(seed: int) -> float:
    rng = np.random.default_rng(seed)
    net = nnet.init_network(nnet.dense_stack([3, 6, 4]), seed)
    batch = nnet.Batch(rng.standard_normal((5, 3)), rng.integers(0, 4, 5))
    _, gws, gbs = nnet.loss_and_grads(net, batch)
    ws = [layer.weights for layer in net.layers]
    bs = [layer.bias for layer in net.layers]
    acts = [s.activation for s in net.spec]

    def f():
        return oracles.mlp_loss(ws, bs, acts, batch.inputs, batch.labels)

    fd = oracles.central_difference(f, ws + bs)
    return max(oracles.relative_error(a, b) for a, b in zip(gws + gbs, fd))


CHECKS = [
    ("gp posterior vs Gauss-Jordan inverse", check_gp, 1e-8),
    ("expected improvement vs Monte Carlo", check_ei, 1e-2),
    ("backprop vs central differences", check_gradients, 1e-4),
]


def run_all(seed: int = 0, out=print) -> bool:
    ok = True
    for name, fn, tol in CHECKS:
        err = fn(seed)
        passed = err <= tol
        ok &= passed
        out(f"{'PASS' if passed else 'FAIL'}  {name}: max error {err:.3g} (tol {tol:g})")
    return ok
