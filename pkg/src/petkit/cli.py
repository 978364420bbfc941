"""Command-line front end: ``petkit {params,gradcheck,train,sweep,report}``.

Exit codes: 0 success, 1 check or training failure, 2 config error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .accounting import ParamReport, apply_strategy, count_params, derive_rng
from .backbone import build_backbone
from .config import RunConfig, load_config
from .harness import TrainingError, attach_head, low_resource_sweep, lr_grid_search
from .synth import gen_synthetic_dataset
from .tensor import ConfigError

log = logging.getLogger("petkit")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def new_run_dir(root: str | Path, command: str) -> Path:
    """A fresh timestamped subdirectory; never reuses an existing one."""
    root = Path(root)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    path = root / f"{command}-{stamp}"
    n = 1
    while path.exists():
        path = root / f"{command}-{stamp}-{n}"
        n += 1
    path.mkdir(parents=True)
    return path


def write_csv(path: Path, rows: list[dict], fields: list[str] | None = None) -> None:
    """Explicit ``fields`` select columns; other keys are dropped."""
    fields = fields or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


def write_jsonl(path: Path, rows) -> None:
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _record_row(rec, **extra) -> dict:
    d = rec.to_dict()
    d.pop("wall_time")
    d.update(extra)
    return d


# ---------------------------------------------------------------- params

def param_rows(report: ParamReport) -> list[dict]:
    rows = [dict(r, kind="component") for r in report.records()]
    for r in rows:
        if r["component"] in ("trainable_total", "head", "frozen_backbone", "backbone_total"):
            r["kind"] = "total"
    blocks = sorted((int(k[len("cnn.block"):]), v) for k, v in report.components.items()
                    if k.startswith("cnn.block"))
    running = 0
    for n, (_, count) in enumerate(reversed(blocks), start=1):
        running += count
        rows.append({"component": f"cnn.top{n}", "convention": report.convention, "count": running,
                     "kind": "subtotal"})
    return rows


def format_report(reports: list[ParamReport]) -> str:
    lines = []
    for rep in reports:
        lines.append(f"convention: {rep.convention}")
        for r in param_rows(rep):
            lines.append(f"  {r['component']:<20} {r['count']:>14,d}  {r['kind']}")
        lines.append(f"  {'trainable_ratio':<20} {rep.trainable_ratio:>14.6f}")
    return "\n".join(lines)


def strategy_reports(cfg: RunConfig, conventions) -> list[ParamReport]:
    backbone = build_backbone(cfg.backbone, cfg.backbone_seed, materialize=False)
    model, _ = apply_strategy(backbone, cfg.strategy, cfg.seed)
    hidden, k = cfg.backbone.hidden, cfg.task.n_classes
    heads = [np.empty((hidden, k)), np.empty(k)]
    reports = []
    for conv in conventions:
        rep = count_params(model, conv, head_params=[T.Tensor(h) for h in heads])
        reports.append(rep)
    return reports


def cmd_params(cfg: RunConfig, args) -> int:
    conventions = ["weights-only", "all"] if args.convention == "both" else [args.convention]
    reports = strategy_reports(cfg, conventions)
    out = new_run_dir(args.out or cfg.out, "params")
    rows = [r for rep in reports for r in param_rows(rep)]
    write_csv(out / "params.csv", rows, ["component", "convention", "count", "kind"])
    write_jsonl(out / "params.jsonl", rows)
    print(f"strategy: {cfg.strategy.label}  backbone: {cfg.backbone_name}")
    print(format_report(reports))
    print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------- gradcheck

def gradient_check(cfg: RunConfig, eps: float = 1e-5, perturb: float = 0.1):
    """Max relative error of the full task loss over every trainable tensor, in float64.

    Adapter and head tensors are moved off their near-identity init first so
    every gradient path carries signal.
    """
    with T.precision("verify-64bit"):
        backbone = build_backbone(cfg.backbone, cfg.backbone_seed)
        pet, _ = apply_strategy(backbone, cfg.strategy, cfg.seed)
        task = attach_head(pet, cfg.task.n_classes, seed=cfg.seed)
        rng = derive_rng(cfg.seed, "gradcheck")
        params, names = [], []
        for name, t, comp, _ in pet.named_parameters():
            if t.trainable:
                if comp != "backbone":
                    t.data += rng.standard_normal(t.shape) * perturb
                params.append(t)
                names.append(name)
        params += task.head_parameters()
        names += ["head.w", "head.b"]
        wave = T.tensor(rng.standard_normal((1, 1, cfg.task.wave_length)))
        label = np.array([int(rng.integers(cfg.task.n_classes))])

        def loss():
            return T.softmax_cross_entropy(task.logits(wave), label)

        return T.grad_check(loss, params, eps=eps, names=names, return_worst=True)


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    err, worst = gradient_check(cfg, args.eps)
    ok = err < args.tolerance
    print(f"max relative error {err:.3e} at {worst} (tolerance {args.tolerance:g}): {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------- train / sweep

def _setup(cfg: RunConfig):
    dataset = gen_synthetic_dataset(cfg.task)
    with T.precision(cfg.mode):
        backbone = build_backbone(cfg.backbone, cfg.backbone_seed)
    return backbone, dataset


def _epoch_rows(records) -> list[dict]:
    rows = []
    for r in records:
        for e, (loss, acc) in enumerate(zip(r.train_loss, r.val_acc), start=1):
            rows.append({"strategy": r.strategy, "lr": r.lr, "seed": r.seed,
                         "subset_fraction": r.subset_fraction, "epoch": e,
                         "train_loss": f"{loss:.8g}", "val_acc": f"{acc:.6f}"})
    return rows


SUMMARY_FIELDS = ["strategy", "kind", "lr", "seed", "subset_fraction", "trainable_total", "best_epoch",
                  "best_val_acc", "test_acc", "train_acc", "best"]


def cmd_train(cfg: RunConfig, args) -> int:
    backbone, dataset = _setup(cfg)
    best, records = lr_grid_search(backbone, cfg.strategy, dataset, cfg.train)
    out = new_run_dir(args.out or cfg.out, "train")
    write_jsonl(out / "records.jsonl", [_record_row(r, best=r is best) for r in records])
    write_csv(out / "metrics.csv", _epoch_rows(records))
    write_csv(out / "summary.csv", [_record_row(r, best=r is best) for r in records], SUMMARY_FIELDS)
    write_csv(out / "timing.csv", [{"lr": r.lr, "wall_time": f"{r.wall_time:.3f}"} for r in records])
    print(f"{best.strategy}: best lr {best.lr:g}, val {best.best_val_acc:.3f}, test {best.test_acc:.3f}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, args) -> int:
    if cfg.sweep is None:
        raise ConfigError("sweep command needs a [sweep] table")
    backbone, dataset = _setup(cfg)
    sw = cfg.sweep
    cells, table = low_resource_sweep(backbone, sw.strategies, dataset, cfg.train,
                                      sw.fractions, sw.seeds, jobs=sw.jobs)
    out = new_run_dir(args.out or cfg.out, "sweep")
    write_jsonl(out / "records.jsonl", [_record_row(c.best, best=True) for c in cells])
    write_jsonl(out / "runs.jsonl", [_record_row(r, best=r is c.best) for c in cells for r in c.records])
    write_csv(out / "metrics.csv", _epoch_rows([r for c in cells for r in c.records]))
    write_csv(out / "sweep.csv", table)
    for row in table:
        print(f"{row['strategy']:<32} fraction {row['fraction']:<5} test {row['test_acc_mean']:.3f}"
              f" ± {row['test_acc_sd']:.3f}  gap {row['gap_mean']:+.3f} ± {row['gap_sd']:.3f}")
    print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------- report

def collect_records(run_dir: Path) -> list[dict]:
    rows = []
    for path in sorted(run_dir.rglob("records.jsonl")):
        with open(path) as fh:
            rows += [json.loads(line) for line in fh if line.strip()]
    return rows


def build_report(records: list[dict]) -> list[dict]:
    """One row per strategy: its recorded trainable params and best test accuracy, ascending by params."""
    best: dict[str, dict] = {}
    for r in records:
        cur = best.get(r["strategy"])
        if cur is None or r["test_acc"] > cur["test_acc"]:
            best[r["strategy"]] = r
    rows = [{"strategy": s, "kind": r["kind"], "trainable_total": r["trainable_total"],
             "test_acc": r["test_acc"], "lr": r["lr"], "subset_fraction": r["subset_fraction"]}
            for s, r in best.items()]
    return sorted(rows, key=lambda r: (r["trainable_total"], r["strategy"]))


def cmd_report(run_dir: str, args) -> int:
    path = Path(run_dir)
    records = collect_records(path) if path.is_dir() else []
    if not records:
        print(f"no run records under {run_dir}", file=sys.stderr)
        return EXIT_CONFIG
    rows = build_report(records)
    out = new_run_dir(args.out or path, "report")
    write_csv(out / "report.csv", rows)
    write_csv(out / "records.csv", records, sorted({k for r in records for k in r
                                                   if not isinstance(r[k], list)}))
    for r in rows:
        print(f"{r['strategy']:<32} {r['trainable_total']:>10,d}  {r['test_acc']:.3f}")
    print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------- entry

CONFIG_HELP = """\
config file (TOML, unknown keys are errors); defaults in parentheses:
  mode = "verify-64bit" | "train-32bit" ("train-32bit")    seed (0)    out ("runs")
  [backbone]  preset = "mini" | "hubert-base-shape" ("mini"), seed (0)
              or inline: n_layers, hidden, n_heads, ff_dim and
              [[backbone.conv_blocks]] in_channels, out_channels, kernel, stride
  [strategy]  kind = finetune | frozen | weighted_sum | houlsby | cnn_adapter | chapter ("chapter")
              include_conv_tap (false)
  [strategy.cnn]      top_n = N | "all" ("all"), compression (1), alpha (1.0)
  [strategy.houlsby]  bottleneck (32), placement = "ff" | "attn+ff" ("ff")
  [task]      n_classes (10), samples_per_class (100), wave_length (400), snr_db (30.0), seed (0)
  [train]     lr_grid ([1e-3, 1e-4, 1e-5]), epochs (50), batch_size (8),
              optimizer = "adam" | "sgd" ("adam"), subset_fraction (1.0)
  [sweep]     fractions ([1.0, 0.5, 0.25, 0.1]), seeds ([0, 1, 2]), jobs (1),
              one [[sweep.strategy]] table per strategy (same keys as [strategy])

exit codes: 0 success, 1 check or training failure, 2 config error
"""


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="petkit", description=__doc__.splitlines()[0], epilog=CONFIG_HELP,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help):
        return sub.add_parser(name, help=help, description=help, epilog=CONFIG_HELP,
                              formatter_class=argparse.RawDescriptionHelpFormatter)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True, help="TOML run config")
        sp.add_argument("--out", default=None, help="output root (default: config 'out', else ./runs)")
        sp.add_argument("--seed", type=int, default=None, help="override the config's top-level seed")

    sp = add("params", "trainable-parameter report")
    common(sp)
    sp.add_argument("--convention", choices=["weights-only", "all", "both"], default="both",
                    help="which tensors count toward the totals (both)")
    sp = add("gradcheck", "central-difference gradient check (float64)")
    common(sp)
    sp.add_argument("--eps", type=float, default=1e-5, help="central-difference step (1e-5)")
    sp.add_argument("--tolerance", type=float, default=1e-4, help="pass iff max relative error is below this (1e-4)")
    common(add("train", "learning-rate grid search for one strategy"))
    common(add("sweep", "low-resource sweep over strategies, fractions and seeds"))
    sp = add("report", "accuracy-vs-params table from run records")
    sp.add_argument("run_dir")
    common(sp, config=False)
    return p


COMMANDS = {"params": cmd_params, "gradcheck": cmd_gradcheck, "train": cmd_train, "sweep": cmd_sweep}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        if args.command == "report":
            return cmd_report(args.run_dir, args)
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed, train=replace(cfg.train, seed=args.seed))
        return COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, T.NumericError) as e:
        print(f"failed: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
