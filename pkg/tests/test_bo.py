import numpy as np
import pytest
from scipy.stats import norm

from fineprune import bo, gp, oracles
from fineprune.errors import StateError

UNIT4 = np.array([[0.0, 1.0]] * 4)


def quadratic(x):
    v = float(np.sum((np.asarray(x) - 0.3) ** 2))
    return v, 0.0, v


def test_ei_degenerate_limit():
    assert bo.ei_from_moments(0.7, 0.0, 0.7) == 0.0
    assert bo.ei_from_moments(0.5, 0.0, 0.7) == pytest.approx(0.2)
    assert bo.ei_from_moments(0.9, 1e-13, 0.7) == 0.0


def test_ei_at_zero_score():
    # Z = 0 -> EI = sigma * phi(0) = 1/sqrt(2 pi)
    assert bo.ei_from_moments(1.25, 1.0, 1.25) == pytest.approx(0.3989422804014327, abs=1e-15)


def test_ei_sign_convention():
    # improvement means lower values: a mean below the incumbent must score higher
    assert bo.ei_from_moments(0.0, 0.5, 1.0) > bo.ei_from_moments(2.0, 0.5, 1.0)
    assert bo.ei_from_moments(0.0, 0.5, 1.0) >= 1.0


@pytest.mark.parametrize("seed", range(5))
def test_ei_vs_monte_carlo(seed):
    rng = np.random.default_rng(seed)
    mu, sigma, best = rng.normal(), rng.uniform(0.05, 2), rng.normal()
    mc = oracles.ei_monte_carlo(mu, sigma, best, 1_000_000, seed=100 + seed)
    assert abs(bo.ei_from_moments(mu, sigma, best) - mc) <= 3e-3


def test_ei_closed_form_by_hand():
    mu, sigma, best = 0.3, 0.8, 0.5
    z = (best - mu) / sigma
    ref = (best - mu) * norm.cdf(z) + sigma * norm.pdf(z)
    assert bo.ei_from_moments(mu, sigma, best) == pytest.approx(ref, rel=1e-14)


def test_ei_increases_with_sigma():
    # below sigma = gap/6 the increments fall under one ulp of the gap itself
    for mu, best in [(0.0, 0.5), (0.4, 0.5), (-2.0, 1.0), (0.99, 1.0)]:
        sig = np.linspace((best - mu) / 6, 3, 300)
        ei = bo.ei_from_moments(np.full_like(sig, mu), sig, best)
        assert np.all(np.diff(ei) > 0)


def test_ei_requires_fitted_model():
    with pytest.raises(StateError):
        bo.expected_improvement(gp.fit(np.zeros((0, 2)), [], dim=2), np.zeros(2), 0.0)


def test_ei_zero_at_noiseless_incumbent():
    h = gp.KernelHyper(signal=1.0, lengthscales=0.3, noise=gp.JITTER_FLOOR)
    model = gp.fit([[0.5, 0.5]], [2.0], h)
    assert bo.expected_improvement(model, np.array([0.5, 0.5]), 2.0) == 0.0


def test_ei_nonnegative_everywhere():
    rng = np.random.default_rng(2)
    model = gp.fit(rng.random((8, 3)), rng.standard_normal(8), "auto")
    ei = bo.expected_improvement(model, rng.random((5000, 3)), float(model.y.min()))
    assert np.all(ei >= 0)


def test_quasi_uniform_is_seeded():
    a = bo.quasi_uniform(64, 3, 5)
    np.testing.assert_array_equal(a, bo.quasi_uniform(64, 3, 5))
    assert not np.array_equal(a, bo.quasi_uniform(64, 3, 6))
    assert a.min() >= 0 and a.max() < 1
    # one point per cell of a 4x4x4 grid is the (0, m, s) net property for 64 points
    cells = {tuple(c) for c in np.floor(a * 4).astype(int)}
    assert len(cells) == 64


def test_proposal_moves_away_from_bad_centre():
    centre = np.full(3, 0.5)
    model = gp.fit([centre], [5.0], "auto")
    state = bo.BOState(history=[bo.EvalRecord(centre, centre, 5.0, 0.0, 5.0)], seed=1)
    z = bo.propose_candidate(model, state)
    assert not np.allclose(z, centre)
    assert np.linalg.norm(z - centre) > 0.3


def test_proposal_deterministic():
    rng = np.random.default_rng(0)
    X = rng.random((5, 2))
    model = gp.fit(X, rng.standard_normal(5), "auto")
    hist = [bo.EvalRecord(x, x, float(v), 0.0, float(v)) for x, v in zip(X, model.y)]
    state = bo.BOState(history=hist, seed=3)
    np.testing.assert_array_equal(bo.propose_candidate(model, state, 4),
                                  bo.propose_candidate(model, state, 4))


def test_1d_toy_against_grid_scan():
    h = gp.KernelHyper(signal=1.0, lengthscales=0.2, noise=1e-6)
    X = np.array([[0.1], [0.9]])
    y = np.array([1.0, 0.5])
    model = gp.fit(X, y, h)
    hist = [bo.EvalRecord(x, x, v, 0.0, v) for x, v in zip(X, y)]
    z = bo.propose_candidate(model, bo.BOState(history=hist, seed=0))
    assert 0.5 < z[0] <= 1.0
    grid = np.linspace(0, 1, 10_000).reshape(-1, 1)
    ei = bo.expected_improvement(model, grid, 0.5)
    g_best = grid[np.argmax(ei), 0]
    assert 0.5 < g_best <= 1.0
    assert abs(z[0] - g_best) < 0.01
    assert bo.expected_improvement(model, z, 0.5) >= ei.max() * 0.999


def test_budget_one_uses_seeded_quasi_uniform_point():
    seen = []

    def f(x):
        seen.append(np.array(x))
        return quadratic(x)

    best, hist = bo.bo_round(f, UNIT4, budget=1, seed=9)
    assert len(hist) == 1 and len(seen) == 1
    np.testing.assert_array_equal(seen[0], bo.quasi_uniform(1, 4, [9, 0xFFFF])[0])
    assert best is hist[0]


def test_bounds_are_respected():
    box = np.array([[-2.0, 2.0], [10.0, 11.0]])
    _, hist = bo.bo_round(lambda x: (0.0, 0.0, float(x[0] ** 2 + (x[1] - 10.5) ** 2)), box,
                          budget=15, seed=0)
    for r in hist:
        assert np.all(r.x >= box[:, 0]) and np.all(r.x <= box[:, 1])
        np.testing.assert_allclose(r.x, box[:, 0] + r.z * (box[:, 1] - box[:, 0]))


def test_round_history_invariants():
    best, hist = bo.bo_round(quadratic, UNIT4, budget=50, seed=2)
    assert len(hist) <= 50
    assert best.l == min(r.l for r in hist)
    running = np.minimum.accumulate([r.l for r in hist])
    assert np.all(np.diff(running) <= 0)
    assert [r.eval_idx for r in hist] == list(range(len(hist)))


def test_round_reproducible():
    runs = [bo.bo_round(quadratic, UNIT4, budget=20, seed=4, timing=False)[1] for _ in range(2)]
    assert [(r.x.tobytes(), r.l) for r in runs[0]] == [(r.x.tobytes(), r.l) for r in runs[1]]


def test_warm_start_counts_toward_budget():
    warm = []
    for z in np.random.default_rng(0).random((3, 4)):
        e, s, l = quadratic(z)
        warm.append(bo.EvalRecord(z, z, e, s, l))
    calls = []
    _, hist = bo.bo_round(lambda x: calls.append(1) or quadratic(x), UNIT4, budget=5,
                          seed=0, warm_start=warm, patience=None)
    assert len(hist) == 5 and len(calls) == 2
    assert hist[:3] == warm


def test_patience_stops_early():
    _, hist = bo.bo_round(lambda x: (1.0, 0.0, 1.0), UNIT4, budget=50, seed=0, patience=4)
    assert len(hist) == 5  # first evaluation improves on nothing-yet, then four stale ones


def test_failures_are_recorded_and_skipped():
    count = {"n": 0}

    def flaky(x):
        count["n"] += 1
        if count["n"] % 3 == 0:
            raise FloatingPointError("boom")
        if count["n"] % 3 == 1 and count["n"] > 1:
            return 0.0, 0.0, float("nan")
        return quadratic(x)

    best, hist = bo.bo_round(flaky, UNIT4, budget=12, seed=1, patience=None)
    assert len(hist) == 12
    failed = [r for r in hist if r.failed]
    assert len(failed) == 7
    assert all(r.l == bo.FAILED for r in failed)
    assert not best.failed


def test_quadratic_benchmark():
    bests = [bo.bo_round(quadratic, UNIT4, budget=50, seed=s)[0].l for s in range(10)]
    assert sum(b <= 0.01 for b in bests) >= 8
