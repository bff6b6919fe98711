"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL ...`` line (shown even
without ``-s``) and then asserts.  Run with ``pytest tests/test_acceptance.py``.
"""

import copy
import time

import numpy as np
import pytest

from fineprune import bo, cli, finepruner as fp, gp, nnet, oracles, surgery


def verdict(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# 1


def test_criterion_1_gp_oracle(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_mean = worst_var = excess = 0.0
    for _ in range(50):
        d, n = int(rng.integers(1, 9)), int(rng.integers(1, 21))
        X, y = rng.random((n, d)), rng.standard_normal(n)
        hyper = gp.KernelHyper(signal=float(rng.uniform(0.25, 4)),
                               lengthscales=tuple(rng.uniform(0.2, 2.0, d)),
                               noise=float(10 ** rng.uniform(-6, -2)))
        model = gp.fit(X, y, hyper)
        for xq in np.vstack([rng.random((4, d)), X[:2]]):
            mu, var = gp.posterior(model, xq)
            mu_o, var_o = oracles.gp_posterior_naive(X, y, xq, hyper.signal, hyper.scales(d),
                                                     model.noise)
            worst_mean = max(worst_mean, abs(mu - mu_o))
            worst_var = max(worst_var, abs(var - var_o))
            excess = max(excess, var - hyper.signal)
    dt = time.perf_counter() - t0
    ok = worst_mean <= 1e-8 and worst_var <= 1e-8 and excess <= 1e-8 and dt < 5
    verdict(capsys, 1, ok, f"max |dmu|={worst_mean:.2e} max |dvar|={worst_var:.2e} "
                           f"max var-prior={excess:.2e} time={dt:.2f}s")


# 2


def _well_conditioned(rng, d, n):
    while True:
        X = rng.random((n, d))
        h = gp.KernelHyper(signal=1.0, lengthscales=tuple(rng.uniform(0.05, 0.4, d)),
                           noise=gp.JITTER_FLOOR)
        if np.linalg.cond(gp.kernel_matrix(X, X, h)) <= 1e4:
            return X, h


def test_criterion_2_expected_improvement(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    mc_err = 0.0
    for i in range(20):
        mu, sigma, best = rng.normal(), rng.uniform(0.05, 2.0), rng.normal()
        mc = oracles.ei_monte_carlo(mu, sigma, best, 1_000_000, seed=1000 + i)
        mc_err = max(mc_err, abs(bo.ei_from_moments(mu, sigma, best) - mc))

    mus = rng.normal(scale=3, size=20_000)
    sig = np.abs(rng.normal(scale=2, size=20_000))
    sig[::7] = 0.0
    neg = float(np.min(bo.ei_from_moments(mus, sig, 0.3)))
    for _ in range(20):
        d, n = int(rng.integers(1, 6)), int(rng.integers(1, 15))
        model = gp.fit(rng.random((n, d)), rng.standard_normal(n), "auto")
        ei = bo.expected_improvement(model, rng.random((2000, d)), float(model.y.min()))
        neg = min(neg, float(ei.min()))

    at_inc = bo.ei_from_moments(0.4, 0.0, 0.4)
    for _ in range(30):
        d, n = int(rng.integers(1, 6)), int(rng.integers(1, 15))
        X, h = _well_conditioned(rng, d, n)
        y = rng.standard_normal(n)
        model = gp.fit(X, y, h)
        k = int(np.argmin(y))
        at_inc = max(at_inc, float(bo.expected_improvement(model, X[k], float(y[k]))))
    dt = time.perf_counter() - t0
    ok = mc_err <= 3e-3 and neg >= 0 and at_inc <= 1e-9 and dt < 30
    verdict(capsys, 2, ok, f"max |EI-MC|={mc_err:.2e} min EI={neg:.2e} "
                           f"max EI at incumbent={at_inc:.2e} time={dt:.2f}s")


# 3


def test_criterion_3_bo_quadratic(capsys):
    box = np.array([[0.0, 1.0]] * 4)

    def f(x):
        v = float(np.sum((np.asarray(x) - 0.3) ** 2))
        return v, 0.0, v

    t0 = time.perf_counter()
    bests = [bo.bo_round(f, box, 50, seed=s)[0].l for s in range(10)]
    dt = time.perf_counter() - t0
    rand = [min(f(x)[2] for x in np.random.default_rng(s).random((50, 4))) for s in range(10)]
    hits = sum(b <= 0.01 for b in bests)
    ok = hits >= 8 and np.median(bests) < np.median(rand) and dt < 10
    verdict(capsys, 3, ok, f"{hits}/10 seeds <= 0.01, median BO={np.median(bests):.2e} "
                           f"vs random={np.median(rand):.2e}, time={dt:.2f}s")


# 4


def test_criterion_4_gradient_check(capsys):
    t0 = time.perf_counter()
    worst, sizes = 0.0, []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        widths = [int(rng.integers(2, 6))] + [int(rng.integers(3, 17))
                                              for _ in range(rng.integers(1, 3))]
        widths.append(int(rng.integers(2, 5)))
        net = nnet.init_network(nnet.dense_stack(widths), seed)
        for layer in net.layers:
            layer.bias = rng.uniform(-0.5, 0.5, layer.bias.shape)
            if seed % 2:
                layer.mask = rng.random(layer.mask.shape) < 0.7
        sizes.append(net.parameter_count)
        batch = nnet.Batch(rng.standard_normal((8, widths[0])), rng.integers(0, widths[-1], 8))
        _, gws, gbs = nnet.loss_and_grads(net, batch)
        eff = [layer.effective.copy() for layer in net.layers]
        bs = [layer.bias for layer in net.layers]
        acts = [s.activation for s in net.spec]
        fd = oracles.central_difference(
            lambda: oracles.mlp_loss(eff, bs, acts, batch.inputs, batch.labels), eff + bs)
        worst = max(worst, max(oracles.relative_error(a, b) for a, b in zip(gws + gbs, fd)))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-4 and max(sizes) <= 1000 and dt < 10
    verdict(capsys, 4, ok, f"max rel err={worst:.2e} over nets of {min(sizes)}-{max(sizes)} "
                           f"params, time={dt:.2f}s")


# 5


def _masked_net(seed):
    rng = np.random.default_rng(seed)
    widths = [int(rng.integers(2, 6)), int(rng.integers(3, 10)), int(rng.integers(2, 5))]
    net = nnet.init_network(nnet.dense_stack(widths), seed)
    for layer in net.layers:
        layer.mask = rng.random(layer.mask.shape) < 0.5
        layer.mask.flat[0] = False
    # positive hidden biases keep some ReLUs live, otherwise every gradient can vanish
    net.layers[0].bias = rng.uniform(0.1, 0.5, net.layers[0].bias.shape)
    batch = nnet.Batch(rng.standard_normal((6, widths[0])), rng.integers(0, widths[-1], 6))
    return net, batch, rng


def test_criterion_5_mask_semantics(capsys):
    inert = updated = 0
    for seed in range(100):
        net, batch, rng = _masked_net(seed)
        before = nnet.forward(net, batch).tobytes()
        for layer in net.layers:
            layer.weights[~layer.mask] += rng.normal(scale=1e3, size=int((~layer.mask).sum()))
        inert += nnet.forward(net, batch).tobytes() == before

    for seed in range(100):
        net, batch, _ = _masked_net(seed)
        _, gws, _ = nnet.loss_and_grads(net, batch)
        old = [layer.weights.copy() for layer in net.layers]
        nnet.sgd_step(net, batch, 0.1)
        ok = True
        moved = 0
        for layer, w0, g in zip(net.layers, old, gws):
            m = ~layer.mask
            ok &= np.array_equal(layer.weights[m], w0[m] - 0.1 * g[m])
            moved += int(np.count_nonzero(layer.weights[m] != w0[m]))
        updated += ok and moved > 0
    ok = inert == 100 and updated == 100
    verdict(capsys, 5, ok, f"inert {inert}/100, masked weights updated {updated}/100")


# 6


def _surgery_net(rng, seed):
    net = nnet.init_network(nnet.dense_stack([4, 12, 8, 3]), seed)
    for layer in net.layers:
        layer.weights = layer.weights * rng.uniform(0.1, 10)
        layer.mask = rng.random(layer.mask.shape) < 0.5
    return net


def _params(rng, p0=None):
    return surgery.PruningParams(tuple(rng.uniform(0, 3, 3)), tuple(rng.uniform(0, 1, 3)),
                                 p0 if p0 is not None else float(rng.uniform(0.05, 1)),
                                 float(rng.uniform(0, 10)))


def test_criterion_6_surgery_properties(capsys):
    hyst = mono = scale = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        net = _surgery_net(rng, seed)
        p = _params(rng)
        old = [layer.mask.copy() for layer in net.layers]
        zones = [(np.abs(l.weights) >= a * l.weights.std())
                 & (np.abs(l.weights) < (a + m) * l.weights.std())
                 for l, a, m in zip(net.layers, p.thresholds, p.margins)]
        surgery.update_masks(net, p, int(rng.integers(0, 20)), np.random.default_rng(seed))
        hyst += all(np.array_equal(l.mask[z], o[z]) for l, o, z in zip(net.layers, old, zones))

    for seed in range(100):
        rng = np.random.default_rng(10_000 + seed)
        p = _params(rng, p0=1.0)
        k = int(rng.integers(0, 3))
        th = list(p.thresholds)
        th[k] += float(rng.uniform(0, 2))
        q = surgery.PruningParams(tuple(th), p.margins, 1.0, p.kappa)
        sp = []
        for prm in (p, q):
            net = _surgery_net(np.random.default_rng(seed), seed)
            stats = surgery.update_masks(net, prm, 0, np.random.default_rng(0))
            sp.append(stats.layer_sparsity[k])
        mono += sp[1] >= sp[0]

    for seed in range(100):
        rng = np.random.default_rng(20_000 + seed)
        p, c = _params(rng), float(10 ** rng.uniform(-3, 3))
        a = _surgery_net(np.random.default_rng(seed), seed)
        b = copy.deepcopy(a)
        for layer in b.layers:
            layer.weights = layer.weights * c
        surgery.update_masks(a, p, 1, np.random.default_rng(seed))
        surgery.update_masks(b, p, 1, np.random.default_rng(seed))
        scale += all(np.array_equal(x.mask, y.mask) for x, y in zip(a.layers, b.layers))
    ok = hyst == mono == scale == 100
    verdict(capsys, 6, ok, f"hysteresis {hyst}/100, monotone {mono}/100, scale {scale}/100")


# 7 and 8 share the end-to-end runs


SEEDS = range(10)
TOL = 0.02


@pytest.fixture(scope="module")
def desk_runs():
    out = {}
    for seed in SEEDS:
        cfg = cli.load_config(seed=seed)
        splits, net = cli.build_task(cfg)
        fcfg = cli.fineprune_config(cfg)
        for mode in fp.MODES:
            recs = []
            work = copy.deepcopy(net)
            t0 = time.perf_counter()
            rep = fp.run_mode(mode, fcfg, work, splits, recs.append)
            out[seed, mode] = (rep, recs, work, time.perf_counter() - t0)
    return out


@pytest.mark.slow
def test_criterion_7_desk_scale_transfer(desk_runs, capsys):
    within = ordered = raw_ordered = 0
    lines, slowest = [], 0.0
    for seed in SEEDS:
        ft, ind, fpr = (desk_runs[seed, m][0] for m in fp.MODES)
        slowest = max(slowest, sum(desk_runs[seed, m][3] for m in fp.MODES))
        fp_ok = fpr.val_acc >= ft.val_acc - TOL - 1e-12
        ind_ok = ind.val_acc >= ft.val_acc - TOL - 1e-12
        within += fp_ok and fpr.compression >= 10
        ordered += fp_ok and (not ind_ok or fpr.compression >= ind.compression)
        raw_ordered += fpr.compression >= ind.compression
        lines.append(f"    seed {seed}: finetune acc={ft.val_acc:.3f} | independent "
                     f"{ind.compression:6.1f}x acc={ind.val_acc:.3f} | fineprune "
                     f"{fpr.compression:6.1f}x acc={fpr.val_acc:.3f}")
    with capsys.disabled():
        print("\n" + "\n".join(lines), end="")
    ok = within >= 8 and ordered >= 7 and slowest < 600
    verdict(capsys, 7, ok, f">=10x within {TOL:.0%}: {within}/10; fineprune >= independent at "
                           f"tolerance: {ordered}/10 (unconditional {raw_ordered}/10); "
                           f"slowest seed {slowest:.1f}s")


@pytest.mark.slow
def test_criterion_8_bookkeeping(desk_runs, tmp_path, capsys):
    worst, n_recs, sums, roundtrips = 0.0, 0, 0, 0
    for (seed, mode), (rep, recs, net, _) in desk_runs.items():
        for r in recs:
            if not r.failed:
                worst = max(worst, abs(r.l - (r.eps - rep.lam * r.s)))
                n_recs += 1
        for rr in rep.rounds:
            worst = max(worst, abs(rr.l - (rr.eps_val - rep.lam * rr.s)))
        after = sum(layer["after"] for layer in rep.layers)
        kept = sum(layer["remaining_weights"] for layer in rep.layers)
        sums += after == rep.parameters and kept == net.remaining_weights()
        path = tmp_path / f"{seed}-{mode}.fpn1"
        st = nnet.snapshot(net)
        nnet.save_state(path, st)
        back = nnet.load_state(path)
        nnet.save_state(tmp_path / "again.fpn1", back)
        roundtrips += back == st and path.read_bytes() == (tmp_path / "again.fpn1").read_bytes()
    total = len(desk_runs)
    ok = worst <= 1e-12 and sums == total and roundtrips == total
    verdict(capsys, 8, ok, f"max |l-(eps-lam*s)|={worst:.1e} over {n_recs} records; layer sums "
                           f"{sums}/{total}; checkpoint round-trips {roundtrips}/{total}")


# 9


@pytest.mark.slow
def test_criterion_9_reproducibility(tmp_path, capsys):
    for d in ("a", "b"):
        assert cli.main(["run", "--mode", "fineprune", "--seed", "5",
                         "--out", str(tmp_path / d)]) == 0
    same = {name: (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
            for name in ("evals.jsonl", "run.json")}
    lines = len((tmp_path / "a" / "evals.jsonl").read_text().splitlines())
    verdict(capsys, 9, all(same.values()), f"byte-identical {same} ({lines} eval lines)")
