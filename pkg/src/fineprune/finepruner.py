"""Fine-pruning: alternate fine-tuning, BO over pruning parameters, and pruning.

Also provides the two reference pipelines (fine-tune only; fine-tune fully
then prune once) and a helper to pick the accuracy/sparsity weight.
"""

from __future__ import annotations

import copy
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import bo
from .data import Splits
from .errors import FinePruneError
from .nnet import (MaskedNetwork, NetworkState, iter_minibatches, restore, sgd_step, snapshot,
                   top1_error, train_epoch)
from .surgery import (PruningBounds, PruningParams, layer_sparsities, normalize, sparsity,
                      update_masks)

log = logging.getLogger(__name__)

MODES = ("finetune_only", "independent", "fineprune")
CADENCES = ("once", "epoch", "step")

# stream ids mixed into the run seed so that each consumer gets its own rng
_S_INITIAL, _S_TUNE, _S_WARM, _S_EVAL, _S_BO = 1, 2, 3, 4, 5


@dataclass
class FinePruneConfig:
    lam: float = 1.0
    max_rounds: int = 10
    budget: int = 50
    lr: float = 0.001
    epochs: int = 10
    initial_epochs: int = 10
    eval_epochs: int = 2
    batch_size: int = 8
    tau: float = 0.02
    n_init: int = 5
    seed: int = 0
    pool_size: int = 2048
    patience: int | None = 10
    ei_tol: float = 1e-4
    mask_cadence: str = "epoch"
    converge_l: float = 1e-3
    converge_s: float = 0.005
    bounds: PruningBounds = field(default_factory=PruningBounds)
    timing: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        for name in ("max_rounds", "budget", "epochs", "batch_size", "n_init", "pool_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.initial_epochs < 0 or self.eval_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if not 0 <= self.tau <= 1:
            raise ValueError("tau must lie in [0, 1]")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be >= 1 or None")
        if self.mask_cadence not in CADENCES:
            raise ValueError(f"mask_cadence must be one of {CADENCES}")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class RoundResult:
    round: int
    params: dict | None
    eps_val: float
    eps_test: float
    s: float
    l: float  # noqa: E741
    parameters: int
    remaining_weights: int
    compression: float
    layer_sparsity: list[float]
    evaluations: int = 0
    bo_best_l: float | None = None


@dataclass
class RunReport:
    mode: str
    lam: float
    rounds: list[RoundResult] = field(default_factory=list)
    initial_eps_val: float | None = None
    initial_eps_test: float | None = None
    val_acc: float | None = None
    test_acc: float | None = None
    total_weights: int = 0
    total_biases: int = 0
    parameters: int = 0
    compression: float = 1.0
    layers: list[dict] = field(default_factory=list)
    complete: bool = True
    error: str | None = None
    evaluations: int = 0
    config: dict | None = None

    @property
    def eps_val(self) -> float:
        return 1.0 - self.val_acc

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "RunReport":
        obj = dict(obj)
        obj["rounds"] = [RoundResult(**r) for r in obj.get("rounds", [])]
        return cls(**obj)


def compression_rate(total: int, remaining: int) -> float:
    return math.inf if remaining == 0 else total / remaining


def _rng(cfg: FinePruneConfig, *stream) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, *stream])


def fine_tune(net: MaskedNetwork, train, lr: float, epochs: int, rng: np.random.Generator,
              batch_size: int = 8) -> float:
    """SGD over shuffled epochs with masks held fixed; returns the last epoch's mean loss."""
    if not lr > 0:
        raise ValueError(f"lr must be > 0, got {lr}")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    batch = train.batch() if hasattr(train, "batch") else train
    loss = float("nan")
    for _ in range(epochs):
        loss = train_epoch(net, batch, lr, batch_size, rng)
    return loss


def prune_and_tune(net: MaskedNetwork, params: PruningParams, train, cfg: FinePruneConfig,
                   epochs: int, rng: np.random.Generator) -> None:
    """Apply ``params`` and fine-tune, interleaving mask updates per ``cfg.mask_cadence``.

    The cooling iteration counts mask-update calls, starting from 0.
    """
    batch = train.batch() if hasattr(train, "batch") else train
    it = 0
    update_masks(net, params, it, rng)
    for e in range(epochs):
        if cfg.mask_cadence == "epoch" and e > 0:
            it += 1
            update_masks(net, params, it, rng)
        if cfg.mask_cadence == "step":
            for mb in iter_minibatches(batch, cfg.batch_size, rng):
                sgd_step(net, mb, cfg.lr)
                it += 1
                update_masks(net, params, it, rng)
        else:
            train_epoch(net, batch, cfg.lr, cfg.batch_size, rng)


@dataclass
class EvalContext:
    """Everything a candidate evaluation needs: the network to borrow, the state
    to start from, the data, and which outer round this is."""

    net: MaskedNetwork
    state: NetworkState
    splits: Splits
    config: FinePruneConfig
    round: int = 0


def candidate_seed(cfg: FinePruneConfig, round_index: int, params: PruningParams) -> list[int]:
    words = params.as_vector().view(np.uint32).tolist()
    return [cfg.seed, _S_EVAL, round_index, *words]


def evaluate_objective(params: PruningParams, ctx: EvalContext) -> tuple[float, float, float]:
    """Validation error, sparsity and ``eps - lam*s`` after pruning with ``params``
    and a short fine-tune from ``ctx.state``.

    The borrowed network is put back into ``ctx.state`` afterwards, even on error.
    """
    cfg = ctx.config
    rng = np.random.default_rng(candidate_seed(cfg, ctx.round, params))
    restore(ctx.net, ctx.state)
    try:
        prune_and_tune(ctx.net, params, ctx.splits.train, cfg, cfg.eval_epochs, rng)
        eps = top1_error(ctx.net, ctx.splits.val.batch())
        s = sparsity(ctx.net)
    finally:
        restore(ctx.net, ctx.state)
    return eps, s, eps - cfg.lam * s


def apply_candidate(params: PruningParams, ctx: EvalContext) -> None:
    """Leave ``ctx.net`` in exactly the state ``evaluate_objective`` measured."""
    cfg = ctx.config
    rng = np.random.default_rng(candidate_seed(cfg, ctx.round, params))
    restore(ctx.net, ctx.state)
    prune_and_tune(ctx.net, params, ctx.splits.train, cfg, cfg.eval_epochs, rng)


def _record(params: PruningParams, bounds: PruningBounds, value, round_index: int,
            idx: int) -> bo.EvalRecord:
    eps, s, l = value
    return bo.EvalRecord(x=params.as_vector(), z=normalize(params, bounds), eps=eps, s=s, l=l,
                         round=round_index, eval_idx=idx, params=params.to_json())


def random_warm_start(cfg: FinePruneConfig, n_layers: int) -> list[PruningParams]:
    """Seeded uniform random pruning parameters shared by every mode for one seed."""
    box = cfg.bounds.box(n_layers)
    u = _rng(cfg, _S_WARM).uniform(size=(cfg.n_init, len(box)))
    return [PruningParams.from_vector(box[:, 0] + ui * (box[:, 1] - box[:, 0])) for ui in u]


def _bo_search(ctx: EvalContext, warm: Sequence[PruningParams],
               on_record: Callable[[bo.EvalRecord], None] | None):
    cfg = ctx.config
    n_layers = len(ctx.net.layers)
    box = cfg.bounds.box(n_layers)
    records = []
    for p in warm[:cfg.budget]:
        rec = _record(p, cfg.bounds, evaluate_objective(p, ctx), ctx.round, len(records))
        records.append(rec)
        if on_record is not None:
            on_record(rec)

    def objective(x):
        return evaluate_objective(PruningParams.from_vector(x), ctx)

    def tag(rec: bo.EvalRecord):
        rec.params = PruningParams.from_vector(rec.x).to_json()
        if on_record is not None:
            on_record(rec)

    return bo.bo_round(objective, box, cfg.budget, seed=cfg.seed * 1000 + ctx.round,
                       warm_start=records, round_index=ctx.round, pool_size=cfg.pool_size,
                       patience=cfg.patience, ei_tol=cfg.ei_tol, on_record=tag,
                       timing=cfg.timing)


def _round_result(net, splits, cfg, round_index, params, history=(), best=None) -> RoundResult:
    eps_val = top1_error(net, splits.val.batch())
    eps_test = top1_error(net, splits.test.batch())
    s = sparsity(net)
    remaining = net.remaining_weights()
    return RoundResult(
        round=round_index,
        params=params.to_json() if params is not None else None,
        eps_val=eps_val, eps_test=eps_test, s=s, l=eps_val - cfg.lam * s,
        parameters=remaining + net.bias_count,
        remaining_weights=remaining,
        compression=compression_rate(net.weight_count, remaining),
        layer_sparsity=layer_sparsities(net),
        evaluations=len(history),
        bo_best_l=best.l if best is not None else None,
    )


def layer_table(net: MaskedNetwork) -> list[dict]:
    rows = []
    for i, layer in enumerate(net.layers):
        kept = int(np.count_nonzero(layer.mask))
        rows.append({
            "name": f"{'fc' if net.spec[i].kind == 'dense' else 'conv'}{i + 1}",
            "weights": int(layer.weights.size),
            "biases": int(layer.bias.size),
            "remaining_weights": kept,
            "before": int(layer.weights.size + layer.bias.size),
            "after": kept + int(layer.bias.size),
        })
    return rows


def _finish(report: RunReport, net: MaskedNetwork, splits: Splits, cfg: FinePruneConfig):
    report.val_acc = 1.0 - top1_error(net, splits.val.batch())
    report.test_acc = 1.0 - top1_error(net, splits.test.batch())
    report.total_weights = net.weight_count
    report.total_biases = net.bias_count
    report.parameters = net.remaining_weights() + net.bias_count
    report.compression = compression_rate(net.weight_count, net.remaining_weights())
    report.layers = layer_table(net)
    report.evaluations = sum(r.evaluations for r in report.rounds)
    report.config = cfg.to_json()
    return report


def _initial(net, splits, cfg, report):
    if cfg.initial_epochs > 0:
        fine_tune(net, splits.train, cfg.lr, cfg.initial_epochs, _rng(cfg, _S_INITIAL),
                  cfg.batch_size)
    report.initial_eps_val = top1_error(net, splits.val.batch())
    report.initial_eps_test = top1_error(net, splits.test.batch())


def _guarded(report: RunReport, net, splits, cfg, body):
    try:
        body()
    except (FinePruneError, ArithmeticError, ValueError) as exc:
        log.error("%s run aborted: %s", report.mode, exc)
        report.complete = False
        report.error = f"{type(exc).__name__}: {exc}"
    return _finish(report, net, splits, cfg)


def run_fineprune(cfg: FinePruneConfig, net: MaskedNetwork, splits: Splits,
                  on_record: Callable[[bo.EvalRecord], None] | None = None) -> RunReport:
    """Fine-pruning on ``net`` in place.

    Fine-tune, then per round: snapshot, warm-start (random search in round
    1, the previous winner afterwards), BO over pruning parameters, replay the
    winner on the network, fine-tune.  Stops after ``max_rounds`` or once both
    the best objective and the sparsity settle.
    """
    report = RunReport(mode="fineprune", lam=cfg.lam)

    def body():
        _initial(net, splits, cfg, report)
        prev_best = prev_s = None
        best_params = None
        for r in range(1, cfg.max_rounds + 1):
            ctx = EvalContext(net, snapshot(net), splits, cfg, r)
            warm = random_warm_start(cfg, len(net.layers)) if r == 1 else [best_params]
            best, history = _bo_search(ctx, warm, on_record)
            if best is None:
                raise FinePruneError(f"round {r}: every candidate evaluation failed")
            best_params = PruningParams.from_vector(best.x)
            apply_candidate(best_params, ctx)
            fine_tune(net, splits.train, cfg.lr, cfg.epochs, _rng(cfg, _S_TUNE, r),
                      cfg.batch_size)
            rr = _round_result(net, splits, cfg, r, best_params, history, best)
            report.rounds.append(rr)
            log.info("round %d: s=%.4f eps_val=%.4f compression=%.2f (%d evals)",
                     r, rr.s, rr.eps_val, rr.compression, len(history))
            if prev_best is not None and abs(best.l - prev_best) < cfg.converge_l \
                    and abs(rr.s - prev_s) < cfg.converge_s:
                log.info("converged after round %d", r)
                break
            prev_best, prev_s = best.l, rr.s

    return _guarded(report, net, splits, cfg, body)


def _dense_training(net, splits, cfg, report, record_rounds: bool):
    _initial(net, splits, cfg, report)
    for r in range(1, cfg.max_rounds + 1):
        fine_tune(net, splits.train, cfg.lr, cfg.epochs, _rng(cfg, _S_TUNE, r), cfg.batch_size)
        if record_rounds:
            report.rounds.append(_round_result(net, splits, cfg, r, None))


def run_baseline(mode: str, cfg: FinePruneConfig, net: MaskedNetwork, splits: Splits,
                 on_record: Callable[[bo.EvalRecord], None] | None = None) -> RunReport:
    """Reference pipelines.

    ``finetune_only`` trains for the same number of epochs fine-pruning spends
    on the persistent network and never prunes.  ``independent`` does the same
    training, then one BO round (warm-started with the same random-search
    points as fine-pruning), prunes once and fine-tunes for ``cfg.epochs``.
    """
    if mode not in ("finetune_only", "independent"):
        raise ValueError(f"unknown baseline mode {mode!r}")
    report = RunReport(mode=mode, lam=cfg.lam)

    def body():
        _dense_training(net, splits, cfg, report, record_rounds=mode == "finetune_only")
        if mode == "finetune_only":
            return
        ctx = EvalContext(net, snapshot(net), splits, cfg, 1)
        best, history = _bo_search(ctx, random_warm_start(cfg, len(net.layers)), on_record)
        if best is None:
            raise FinePruneError("every candidate evaluation failed")
        params = PruningParams.from_vector(best.x)
        apply_candidate(params, ctx)
        fine_tune(net, splits.train, cfg.lr, cfg.epochs, _rng(cfg, _S_TUNE, cfg.max_rounds + 1),
                  cfg.batch_size)
        report.rounds.append(_round_result(net, splits, cfg, 1, params, history, best))

    return _guarded(report, net, splits, cfg, body)


def run_mode(mode: str, cfg: FinePruneConfig, net: MaskedNetwork, splits: Splits,
             on_record=None) -> RunReport:
    if mode == "fineprune":
        return run_fineprune(cfg, net, splits, on_record)
    return run_baseline(mode, cfg, net, splits, on_record)


def choose_lambda(reports: dict[float, RunReport], reference_eps_val: float, tau: float) -> float:
    """Highest-compression lambda among runs within ``tau`` of the reference
    validation error; if none qualifies, the lambda with the lowest error.
    Ties keep the earliest grid entry."""
    if not reports:
        raise ValueError("no runs to choose from")
    ok = [lam for lam, rep in reports.items() if rep.eps_val - reference_eps_val <= tau]
    if ok:
        return max(ok, key=lambda lam: reports[lam].compression)
    return min(reports, key=lambda lam: reports[lam].eps_val)


def lambda_sweep(grid: Sequence[float], cfg: FinePruneConfig, net: MaskedNetwork,
                 splits: Splits) -> tuple[RunReport, dict[float, RunReport]]:
    """Fine-tune-only reference plus one fine-pruning run per lambda, each on a copy of ``net``."""
    if not grid:
        raise ValueError("lambda grid is empty")
    start = snapshot(net)
    work = copy.deepcopy(net)
    reference = run_baseline("finetune_only", cfg, work, splits)
    reports = {}
    for lam in grid:
        restore(work, start)
        reports[float(lam)] = run_fineprune(dataclasses.replace(cfg, lam=float(lam)), work, splits)
    return reference, reports


def select_lambda(grid: Sequence[float], cfg: FinePruneConfig, net: MaskedNetwork,
                  splits: Splits) -> float:
    reference, reports = lambda_sweep(grid, cfg, net, splits)
    return choose_lambda(reports, reference.eps_val, cfg.tau)
