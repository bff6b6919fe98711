"""Command-line entry point: ``fineprune run | report | plotdata | selftest``."""

from __future__ import annotations

import argparse
import csv
import difflib
import io
import json
import logging
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import data, finepruner, nnet
from .bo import EvalRecord
from .errors import ConfigError, FinePruneError
from .surgery import PruningBounds

log = logging.getLogger("fineprune")


@dataclass(frozen=True)
class Key:
    type: type
    default: object
    check: object = None  # predicate on the parsed value
    rule: str = ""


def _pos(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _ge1(v):
    return v >= 1


# Flat dotted config keys with their defaults and range checks.
KEYS: dict[str, Key] = {
    "seed": Key(int, None, _nonneg, ">= 0"),
    "mode": Key(str, "fineprune", lambda v: v in finepruner.MODES, f"one of {finepruner.MODES}"),
    "out": Key(str, "runs/latest"),
    "lambda": Key(float, 1.0, _nonneg, ">= 0"),
    "finetune.lr": Key(float, 0.001, _pos, "> 0"),
    "finetune.epochs": Key(int, 10, _ge1, ">= 1"),
    "finetune.initial_epochs": Key(int, 10, _nonneg, ">= 0"),
    "finetune.batch_size": Key(int, 8, _ge1, ">= 1"),
    "fineprune.max_rounds": Key(int, 10, _ge1, ">= 1"),
    "fineprune.eval_epochs": Key(int, 2, _nonneg, ">= 0"),
    "fineprune.n_init": Key(int, 5, _ge1, ">= 1"),
    "fineprune.tau": Key(float, 0.02, lambda v: 0 <= v <= 1, "in [0, 1]"),
    "fineprune.mask_cadence": Key(str, "epoch", lambda v: v in finepruner.CADENCES,
                                  f"one of {finepruner.CADENCES}"),
    "fineprune.converge_l": Key(float, 1e-3, _nonneg, ">= 0"),
    "fineprune.converge_s": Key(float, 0.005, _nonneg, ">= 0"),
    "bo.budget": Key(int, 50, _ge1, ">= 1"),
    "bo.pool_size": Key(int, 2048, _ge1, ">= 1"),
    "bo.patience": Key(int, 10, _nonneg, ">= 0 (0 disables early stopping)"),
    "bo.ei_tol": Key(float, 1e-4, _nonneg, ">= 0"),
    "prune.a_max": Key(float, 3.0, _nonneg, ">= 0"),
    "prune.m_max": Key(float, 1.0, _nonneg, ">= 0"),
    "prune.p0_min": Key(float, 0.05, lambda v: 0 < v <= 1, "in (0, 1]"),
    "prune.p0_max": Key(float, 1.0, lambda v: 0 < v <= 1, "in (0, 1]"),
    "prune.kappa_max": Key(float, 10.0, _nonneg, ">= 0"),
    "data.kind": Key(str, "synthetic", lambda v: v in ("synthetic", "csv"), "synthetic or csv"),
    "data.classes": Key(int, 3, lambda v: v >= 2, ">= 2"),
    "data.source_classes": Key(int, 6, lambda v: v >= 2, ">= 2"),
    "data.per_class": Key(int, 100, lambda v: v >= 4, ">= 4"),
    "data.dims": Key(int, 2, lambda v: v >= 2, ">= 2"),
    "data.spread": Key(float, 0.2, _nonneg, ">= 0"),
    "data.csv": Key(str, ""),
    "data.label_column": Key(str, "label"),
    "net.hidden": Key(list, [64, 64], lambda v: len(v) > 0 and all(
        isinstance(h, int) and h >= 1 for h in v), "a non-empty list of positive integers"),
    "pretrain.epochs": Key(int, 30, _nonneg, ">= 0"),
    "pretrain.lr": Key(float, 0.05, _pos, "> 0"),
    "pretrain.batch_size": Key(int, 16, _ge1, ">= 1"),
    "log.timing": Key(bool, False),
}


def _flatten(obj: dict, prefix: str = "") -> dict:
    flat = {}
    for k, v in obj.items():
        name = f"{prefix}{k}"
        if isinstance(v, dict):
            flat.update(_flatten(v, name + "."))
        else:
            flat[name] = v
    return flat


def _unknown(key: str) -> ConfigError:
    near = difflib.get_close_matches(key, KEYS, n=1, cutoff=0.5)
    hint = f"; did you mean {near[0]!r}?" if near else ""
    return ConfigError(f"unknown config key {key!r}{hint}")


def _coerce(key: str, value):
    spec = KEYS[key]
    if spec.type is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if (spec.type is not bool and isinstance(value, bool)) or not isinstance(value, spec.type):
        raise ConfigError(f"{key}: expected {spec.type.__name__}, got {value!r}")
    if spec.check is not None and not spec.check(value):
        raise ConfigError(f"{key}: value {value!r} out of range (must be {spec.rule})")
    return value


def _parse_override(item: str) -> tuple[str, object]:
    if "=" not in item:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    key, raw = (s.strip() for s in item.split("=", 1))
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return key, value


def load_config(path=None, overrides=(), seed=None) -> dict:
    """Merge defaults, an optional TOML file and ``key=value`` overrides.

    Seed precedence: explicit ``seed`` argument, then config/overrides, then
    the ``FINEPRUNE_SEED`` environment variable, then 0.
    """
    raw = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                raw = _flatten(tomllib.load(fh))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    for item in overrides:
        k, v = _parse_override(item)
        raw[k] = v
    cfg = {k: spec.default for k, spec in KEYS.items()}
    for k, v in raw.items():
        if k not in KEYS:
            raise _unknown(k)
        cfg[k] = _coerce(k, v)
    if seed is not None:
        cfg["seed"] = _coerce("seed", seed)
    if cfg["seed"] is None:
        env = os.environ.get("FINEPRUNE_SEED")
        try:
            cfg["seed"] = int(env) if env else 0
        except ValueError:
            raise ConfigError(f"FINEPRUNE_SEED must be an integer, got {env!r}") from None
    if cfg["prune.p0_min"] > cfg["prune.p0_max"]:
        raise ConfigError("prune.p0_min: must not exceed prune.p0_max")
    if cfg["data.kind"] == "csv" and not cfg["data.csv"]:
        raise ConfigError("data.csv: required when data.kind = 'csv'")
    return cfg


def fineprune_config(cfg: dict) -> finepruner.FinePruneConfig:
    return finepruner.FinePruneConfig(
        lam=cfg["lambda"],
        max_rounds=cfg["fineprune.max_rounds"],
        budget=cfg["bo.budget"],
        lr=cfg["finetune.lr"],
        epochs=cfg["finetune.epochs"],
        initial_epochs=cfg["finetune.initial_epochs"],
        eval_epochs=cfg["fineprune.eval_epochs"],
        batch_size=cfg["finetune.batch_size"],
        tau=cfg["fineprune.tau"],
        n_init=cfg["fineprune.n_init"],
        seed=cfg["seed"],
        pool_size=cfg["bo.pool_size"],
        patience=cfg["bo.patience"] or None,
        ei_tol=cfg["bo.ei_tol"],
        mask_cadence=cfg["fineprune.mask_cadence"],
        converge_l=cfg["fineprune.converge_l"],
        converge_s=cfg["fineprune.converge_s"],
        bounds=PruningBounds(cfg["prune.a_max"], cfg["prune.m_max"], cfg["prune.p0_min"],
                             cfg["prune.p0_max"], cfg["prune.kappa_max"]),
        timing=cfg["log.timing"],
    )


def build_task(cfg: dict):
    """Target splits and the pre-trained network for a resolved config."""
    seed = cfg["seed"]
    hidden = list(cfg["net.hidden"])
    if cfg["data.kind"] == "synthetic":
        task = data.transfer_task(cfg["data.source_classes"], cfg["data.classes"],
                                  cfg["data.per_class"], cfg["data.spread"], cfg["data.dims"], seed)
        source, splits = task.source, task.splits
    else:
        ds = data.load_csv(cfg["data.csv"], cfg["data.label_column"])
        splits = data.standardize(data.split(ds, seed=seed))
        # no separate source domain for CSV input: pre-train on the target training split
        source = splits.train
    spec = nnet.dense_stack([source.features.shape[1], *hidden, source.classes])
    net = data.pretrain(spec, source, cfg["pretrain.epochs"], cfg["pretrain.lr"], seed,
                        target_classes=splits.train.classes,
                        batch_size=cfg["pretrain.batch_size"])
    return splits, net


def eval_line(rec: EvalRecord) -> str:
    def num(v):
        return v if math.isfinite(v) else None

    return json.dumps({
        "round": rec.round,
        "eval_idx": rec.eval_idx,
        "x": rec.params,
        "eps": num(rec.eps),
        "s": num(rec.s),
        "l": num(rec.l),
        "wall_s": rec.wall_s,
        "failed": rec.failed,
    })


def _check_writable(out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    probe = out / ".write-test"
    probe.write_bytes(b"")
    probe.unlink()


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config, args.set or (), args.seed)
        if args.mode:
            cfg["mode"] = _coerce("mode", args.mode)
        if args.out:
            cfg["out"] = args.out
        fcfg = fineprune_config(cfg)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = Path(cfg["out"])
    try:
        _check_writable(out)
    except OSError as exc:
        print(f"error: output directory {out} is not writable: {exc}", file=sys.stderr)
        return 1
    try:
        splits, net = build_task(cfg)
    except (OSError, FinePruneError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    with open(out / "evals.jsonl", "w", encoding="utf-8") as fh:
        def on_record(rec):
            fh.write(eval_line(rec) + "\n")
            fh.flush()

        report = finepruner.run_mode(cfg["mode"], fcfg, net, splits, on_record)
    with open(out / "run.json", "w", encoding="utf-8") as fh:
        json.dump(report.to_json(), fh, indent=2)
        fh.write("\n")
    nnet.save_state(out / "final.fpn1", nnet.snapshot(net))
    print(f"{report.mode}: val_acc={report.val_acc:.4f} test_acc={report.test_acc:.4f} "
          f"parameters={report.parameters} compression={report.compression:.2f}x -> {out}")
    if not report.complete:
        print(f"error: run incomplete: {report.error}", file=sys.stderr)
        return 1
    return 0


def load_report(run_dir) -> finepruner.RunReport:
    path = Path(run_dir) / "run.json"
    try:
        with open(path, encoding="utf-8") as fh:
            return finepruner.RunReport.from_json(json.load(fh))
    except OSError as exc:
        raise FinePruneError(f"{path}: cannot read ({exc.strerror or exc})") from None
    except (ValueError, TypeError, KeyError) as exc:
        raise FinePruneError(f"{path}: corrupt run report ({exc})") from None


def _f(v: float) -> str:
    return repr(float(v))


def report_tables(run_dirs) -> list[list[list[str]]]:
    """Cells for a method comparison table followed by one per-layer table per run."""
    reports = [(str(d), load_report(d)) for d in run_dirs]
    summary = [["run", "mode", "accuracy_val", "accuracy_test", "parameters", "compression_rate"]]
    for name, rep in reports:
        comp = "--" if rep.mode == "finetune_only" else _f(rep.compression)
        summary.append([name, rep.mode, _f(rep.val_acc), _f(rep.test_acc), str(rep.parameters),
                        comp])
    tables = [summary]
    for name, rep in reports:
        rows = [[f"layers: {name}", "parameters_before", "parameters_after", "fraction_pruned"]]
        for layer in rep.layers:
            b, a = layer["before"], layer["after"]
            rows.append([layer["name"], str(b), str(a), _f((b - a) / b)])
        before = sum(layer["before"] for layer in rep.layers)
        after = sum(layer["after"] for layer in rep.layers)
        rows.append(["total", str(before), str(after), _f((before - after) / before)])
        tables.append(rows)
    return tables


def render(tables) -> str:
    out = []
    for rows in tables:
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        for r in rows:
            out.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
        out.append("")
    return "\n".join(out)


def to_csv(tables) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for i, rows in enumerate(tables):
        if i:
            w.writerow([])
        w.writerows(rows)
    return buf.getvalue()


def cmd_report(args) -> int:
    try:
        tables = report_tables(args.run_dirs)
    except FinePruneError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    sys.stdout.write(render(tables))
    Path(args.csv).write_text(to_csv(tables), encoding="utf-8")
    return 0


def plot_rows(rep: finepruner.RunReport, with_initial: bool = False) -> list[list[str]]:
    rows = [["round", "compression_rate", "val_error"]]
    if with_initial:
        rows.append(["0", _f(1.0), _f(rep.initial_eps_val)])
    for r in rep.rounds:
        rows.append([str(r.round), _f(r.compression), _f(r.eps_val)])
    return rows


def cmd_plotdata(args) -> int:
    try:
        rep = load_report(args.run_dir)
    except FinePruneError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    sys.stdout.write(to_csv([plot_rows(rep, args.with_initial)]))
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_all
    return 0 if run_all(seed=args.seed or 0) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fineprune", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="fine-prune (or run a baseline) and write run artifacts")
    r.add_argument("--config", help="TOML config file with dotted keys (e.g. bo.budget = 50)")
    r.add_argument("--mode", choices=finepruner.MODES)
    r.add_argument("--out", help="output directory")
    r.add_argument("--seed", type=int)
    r.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    r.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="comparison and per-layer tables from run directories")
    rep.add_argument("run_dirs", nargs="+")
    rep.add_argument("--csv", default="report.csv", help="where to write the CSV copy")
    rep.set_defaults(func=cmd_report)

    pd = sub.add_parser("plotdata", help="per-round compression/validation-error CSV")
    pd.add_argument("run_dir")
    pd.add_argument("--with-initial", action="store_true",
                    help="prepend a round-0 row for the pre-pruning network")
    pd.set_defaults(func=cmd_plotdata)

    st = sub.add_parser("selftest", help="run the built-in numerical oracle checks")
    st.add_argument("--seed", type=int)
    st.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
