"""Expected-improvement Bayesian optimization over a box (minimization)."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import norm, qmc

from . import gp
from .errors import StateError

log = logging.getLogger(__name__)

FAILED = float("inf")
N_PERTURB = 32
PERTURB_SD = 0.05
SIGMA_EPS = 1e-12


@dataclass
class EvalRecord:
    """One objective evaluation.  ``x`` is the raw point, ``z`` its image in [0,1]^d."""

    x: np.ndarray
    z: np.ndarray
    eps: float
    s: float
    l: float  # noqa: E741
    round: int = 0
    eval_idx: int = 0
    wall_s: float = 0.0
    failed: bool = False
    params: dict | None = None  # JSON form of x, filled in by callers that have one


@dataclass
class BOState:
    history: list[EvalRecord] = field(default_factory=list)
    budget: int = 50
    pool_size: int = 2048
    seed: int = 0

    @property
    def best(self) -> EvalRecord | None:
        ok = [r for r in self.history if not r.failed]
        return min(ok, key=lambda r: r.l) if ok else None


def expected_improvement(model: gp.GPModel, xq, l_best: float):
    """EI for minimization: E[max(0, l_best - f(x))] under the GP posterior."""
    if model.n == 0:
        raise StateError("expected improvement needs a model fitted to at least one point")
    mu, var = gp.posterior(model, xq)
    return ei_from_moments(mu, np.sqrt(var), l_best)


def ei_from_moments(mu, sigma, l_best):
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    gap = l_best - mu
    safe = np.where(sigma > SIGMA_EPS, sigma, 1.0)
    z = gap / safe
    ei = np.where(sigma > SIGMA_EPS, sigma * (z * norm.cdf(z) + norm.pdf(z)), np.maximum(gap, 0.0))
    ei = np.maximum(ei, 0.0)
    return float(ei) if ei.ndim == 0 else ei


def quasi_uniform(n: int, d: int, seed) -> np.ndarray:
    """First ``n`` points of a scrambled Sobol sequence in [0,1]^d."""
    sampler = qmc.Sobol(d, scramble=True, seed=np.random.default_rng(seed))
    m = int(np.ceil(np.log2(max(n, 1))))
    return sampler.random_base2(m)[:n]


def candidate_pool(incumbent: np.ndarray | None, d: int, pool_size: int, seed) -> np.ndarray:
    pool = quasi_uniform(pool_size, d, seed)
    if incumbent is None:
        return pool
    rng = np.random.default_rng(seed)
    local = np.clip(incumbent + PERTURB_SD * rng.standard_normal((N_PERTURB, d)), 0.0, 1.0)
    return np.vstack([pool, local])


def propose_candidate(model: gp.GPModel, state: BOState, step: int = 0) -> np.ndarray:
    """EI argmax over a Sobol pool plus Gaussian moves around the incumbent.

    Ties go to the lowest pool index.  ``step`` varies the pool between calls.
    """
    best = state.best
    inc = best.z if best is not None else None
    l_best = best.l if best is not None else float(np.min(model.y))
    pool = candidate_pool(inc, model.dim, state.pool_size, [state.seed, step])
    ei = expected_improvement(model, pool, l_best)
    return pool[int(np.argmax(ei))].copy()


def _fit_history(history: Sequence[EvalRecord], d: int, hyper):
    ok = [r for r in history if not r.failed]
    if not ok:
        return None
    return gp.fit(np.array([r.z for r in ok]), np.array([r.l for r in ok]), hyper, dim=d)


def bo_round(
    objective: Callable[[np.ndarray], tuple[float, float, float]],
    bounds,
    budget: int = 50,
    seed: int = 0,
    warm_start: Sequence[EvalRecord] = (),
    *,
    round_index: int = 0,
    pool_size: int = 2048,
    patience: int | None = 10,
    ei_tol: float = 1e-4,
    hyper: gp.KernelHyper | str = "auto",
    on_record: Callable[[EvalRecord], None] | None = None,
    timing: bool = True,
) -> tuple[EvalRecord | None, list[EvalRecord]]:
    """Run one propose/evaluate/refit loop and return ``(best, history)``.

    ``objective`` receives raw points inside ``bounds`` (a (d, 2) array) and
    returns ``(eps, s, l)``; ``l`` is minimized.  Warm-start records count
    toward ``budget`` and open the history.  The loop also stops once the best
    value has failed to improve by more than ``ei_tol`` for ``patience``
    consecutive evaluations.  Evaluations that raise or return a non-finite
    value are kept in the history as failed and skipped by the GP.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    box = np.asarray(bounds, dtype=np.float64)
    lo, width = box[:, 0], box[:, 1] - box[:, 0]
    d = len(box)
    state = BOState(history=list(warm_start)[:budget], budget=budget,
                    pool_size=pool_size, seed=seed)
    fresh = quasi_uniform(budget, d, [seed, 0xFFFF])
    stale = 0
    step = 0
    while len(state.history) < budget:
        model = _fit_history(state.history, d, hyper)
        if model is None:
            z = fresh[step % len(fresh)]
        else:
            z = propose_candidate(model, state, step)
        x = lo + z * width
        prev = state.best
        t0 = time.perf_counter()
        try:
            eps, s, l = objective(x)
            failed = not np.isfinite(l)
        except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
            log.warning("objective failed at %s: %s", np.round(x, 4).tolist(), exc)
            eps, s, l, failed = FAILED, FAILED, FAILED, True
        wall = time.perf_counter() - t0 if timing else 0.0
        rec = EvalRecord(x=x, z=z, eps=float(eps), s=float(s), l=FAILED if failed else float(l),
                         round=round_index, eval_idx=len(state.history), wall_s=wall,
                         failed=failed)
        state.history.append(rec)
        if on_record is not None:
            on_record(rec)
        step += 1
        best = state.best
        improved = best is not None and (prev is None or prev.l - best.l > ei_tol)
        stale = 0 if improved else stale + 1
        if patience is not None and stale >= patience:
            log.info("round %d: no improvement for %d evaluations, stopping", round_index, stale)
            break
    return state.best, state.history
