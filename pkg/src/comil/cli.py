"""Command-line entry point: ``comil generate | run | report``.

Exit codes: 0 success, 2 usage/config/format error, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .data import SyntheticSpec, generate, read_dataset, split, write_dataset
from .engine import (
    BENCHMARK_DIMS,
    BENCHMARK_LR,
    Method,
    RunRecord,
    TaskSchedule,
    average_accuracy,
    average_forgetting,
    format_record,
    run_scenario,
)
from .errors import ComilError, DivergenceError
from .memory import save_memory
from .model import save_model
from .training import TrainConfig

log = logging.getLogger("comil")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 2, 3

SUMMARY_HELP = """\
summary.csv (written by `run`):
  header   method,seed,avg_acc,avg_forget
  one row per seed, then a final aggregate row whose seed column is
  "mean±std" and whose metric columns read "<mean>±<sample std>".
comparison.csv (written by `report`):
  method,n_seeds,avg_acc_mean,avg_acc_std,avg_forget_mean,avg_forget_std
Accuracies and forgetting are fractions in [0, 1]; forgetting is nan for
single-task schedules.
"""

CONFIG_HELP = """\
run config: one key=value per line, '#' starts a comment.
  dataset   path to a MILDS file (required)
  method    comil | finetune | rehearse_full_bags | attention_topk | upper_bound
  schedule  class groups, e.g. 0,1;2,3;4,5;6,7 (default: consecutive pairs)
  K         exemplar memory size in instances (default 2000)
  epochs    training epochs per task (default 20)
  lr        SGD learning rate (default 0.02)
  seeds     comma-separated run seeds (default 0,1,2,3,4)
  output    output directory (required)
  d, attn_dim, hidden   network sizes (default 32, 16, 32)
"""


class UsageError(ComilError):
    pass


@dataclass
class RunConfig:
    dataset: Path
    output: Path
    method: Method = Method.COMIL
    schedule: Optional[TaskSchedule] = None
    K: int = 2000
    epochs: int = 20
    lr: float = BENCHMARK_LR
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    model_dims: Dict[str, int] = field(default_factory=lambda: dict(BENCHMARK_DIMS))


def parse_config(text: str, base: Path = Path(".")) -> RunConfig:
    """Parse a flat ``key=value`` run configuration."""
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        values[k] = v

    def take(key, conv, default=None, required=False):
        if key not in values:
            if required:
                raise UsageError(f"config key {key!r} is required")
            return default
        try:
            return conv(values.pop(key))
        except (ValueError, ComilError) as exc:
            raise UsageError(f"config key {key!r}: {exc}") from None

    def path(v):
        p = Path(v)
        return p if p.is_absolute() else base / p

    def seeds(v):
        out = [int(s) for s in v.split(",") if s.strip()]
        if not out:
            raise ValueError("at least one seed required")
        return out

    cfg = RunConfig(
        dataset=take("dataset", path, required=True),
        output=take("output", path, required=True),
        method=take("method", Method, Method.COMIL),
        schedule=take("schedule", TaskSchedule.parse),
        K=take("K", int, 2000),
        epochs=take("epochs", int, 20),
        lr=take("lr", float, BENCHMARK_LR),
        seeds=take("seeds", seeds, [0, 1, 2, 3, 4]),
    )
    for key in ("d", "attn_dim", "hidden"):
        if key in values:
            cfg.model_dims[key] = take(key, int)
    if values:
        raise UsageError(f"unknown config key {sorted(values)[0]!r}")
    if cfg.K < 0 or cfg.epochs < 1 or not cfg.lr >= 0:
        raise UsageError("config keys K, epochs and lr must be non-negative (epochs >= 1)")
    return cfg


def _run_one(dataset, schedule, cfg: RunConfig, seed: int) -> RunRecord:
    return run_scenario(
        dataset,
        schedule,
        cfg.method,
        TrainConfig(epochs=cfg.epochs, lr=cfg.lr),
        K=cfg.K,
        seed=seed,
        model_dims=cfg.model_dims,
    )


def _fmt_mean_std(xs: Sequence[float]) -> str:
    mean, std = _mean_std(xs)
    return f"{mean:.6f}±{std:.6f}"


def _mean_std(xs: Sequence[float]):
    arr = np.asarray(xs, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


def format_summary(records: Sequence[RunRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "seed", "avg_acc", "avg_forget"])
    accs, forgets = [], []
    for r in records:
        acc = average_accuracy(r)
        forget = average_forgetting(r) if len(r.accuracy) >= 2 else float("nan")
        accs.append(acc)
        forgets.append(forget)
        w.writerow([r.method, r.seed, repr(acc), repr(forget)])
    w.writerow([records[0].method, "mean±std", _fmt_mean_std(accs), _fmt_mean_std(forgets)])
    return buf.getvalue()


def cmd_generate(args) -> int:
    spec = SyntheticSpec(
        num_classes=args.classes,
        bags_per_class=args.bags_per_class,
        instances_per_bag=args.instances_per_bag,
        d_in=args.d_in,
        hallmark_fraction=args.hallmark_fraction,
        class_separation=args.class_separation,
        noise_sigma=args.noise_sigma,
        seed=args.seed,
    )
    dataset = split(generate(spec), args.train_fraction, args.seed)
    try:
        write_dataset(dataset, args.output)
    except OSError as exc:
        print(f"error: cannot write {args.output}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_USAGE
    n_inst = sum(len(b) for b in dataset.bags)
    print(f"generated classes={dataset.num_classes} bags={len(dataset.bags)} instances={n_inst}")
    return EXIT_OK


def cmd_run(args) -> int:
    config_path = Path(args.config)
    try:
        cfg = parse_config(config_path.read_text(encoding="utf-8"), base=config_path.parent)
        dataset = read_dataset(cfg.dataset)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ComilError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    schedule = cfg.schedule or TaskSchedule.consecutive(dataset.num_classes)
    cfg.output.mkdir(parents=True, exist_ok=True)

    workers = int(os.environ.get("COMIL_THREADS", "0") or 0)
    records: List[RunRecord] = []
    try:
        if workers > 0 and len(cfg.seeds) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(_run_one, dataset, schedule, cfg, s) for s in cfg.seeds]
                for seed, fut in zip(cfg.seeds, futures):
                    try:
                        records.append(fut.result())
                    except DivergenceError as exc:
                        print(f"error: training diverged for seed {seed}: {exc}", file=sys.stderr)
                        return EXIT_DIVERGED
        else:
            for seed in cfg.seeds:
                try:
                    records.append(_run_one(dataset, schedule, cfg, seed))
                except DivergenceError as exc:
                    print(f"error: training diverged for seed {seed}: {exc}", file=sys.stderr)
                    return EXIT_DIVERGED
    except ComilError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    for r in records:
        (cfg.output / f"run_seed{r.seed}.txt").write_text(format_record(r), encoding="utf-8")
        if r.final_model is not None:
            (cfg.output / f"model_seed{r.seed}.cml").write_bytes(save_model(r.final_model))
        if r.final_memory is not None:
            (cfg.output / f"memory_seed{r.seed}.cmx").write_bytes(save_memory(r.final_memory))
    summary = format_summary(records)
    (cfg.output / "summary.csv").write_text(summary, encoding="utf-8")
    print(summary, end="")
    return EXIT_OK


def read_summary(path: Path):
    """Per-seed (method, acc, forget) rows of a summary.csv."""
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"missing summary {path}: {exc.strerror or exc}") from None
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != ["method", "seed", "avg_acc", "avg_forget"]:
        raise UsageError(f"corrupted summary {path}: bad header")
    out = []
    for lineno, row in enumerate(rows[1:], 2):
        if len(row) != 4:
            raise UsageError(f"corrupted summary {path}: line {lineno} has {len(row)} fields")
        if row[1] == "mean±std":
            continue
        try:
            out.append((row[0], int(row[1]), float(row[2]), float(row[3])))
        except ValueError:
            raise UsageError(f"corrupted summary {path}: line {lineno}") from None
    if not out:
        raise UsageError(f"corrupted summary {path}: no seed rows")
    return out


def comparison_rows(run_dirs: Sequence[Path]):
    rows = []
    for d in run_dirs:
        entries = read_summary(Path(d) / "summary.csv")
        methods = sorted({e[0] for e in entries})
        for m in methods:
            mine = [e for e in entries if e[0] == m]
            acc = _mean_std([e[2] for e in mine])
            forget = _mean_std([e[3] for e in mine])
            rows.append((m, len(mine), acc, forget))
    return rows


def format_table(rows) -> str:
    def cell(ms):
        mean, std = ms
        if math.isnan(mean):
            return "-"
        return f"{100 * mean:.1f} ± {100 * std:.1f}"

    body = [("method", "seeds", "avg acc (%)", "avg forget (%)")]
    body += [(m, str(n), cell(a), cell(f)) for m, n, a, f in rows]
    widths = [max(len(r[i]) for r in body) for i in range(4)]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))) for r in body]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    try:
        rows = comparison_rows([Path(d) for d in args.run_dirs])
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(format_table(rows), end="")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "n_seeds", "avg_acc_mean", "avg_acc_std", "avg_forget_mean", "avg_forget_std"])
    for m, n, (am, asd), (fm, fsd) in rows:
        w.writerow([m, n, repr(am), repr(asd), repr(fm), repr(fsd)])
    try:
        Path(args.output).write_text(buf.getvalue(), encoding="utf-8")
    except OSError as exc:
        print(f"error: cannot write {args.output}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="comil",
        description="Continual attention-MIL benchmark with instance-level rehearsal.",
        epilog=SUMMARY_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-step progress")
    sub = parser.add_subparsers(dest="command", required=True)

    defaults = SyntheticSpec()
    g = sub.add_parser("generate", help="write a synthetic MILDS dataset")
    g.add_argument("-o", "--output", required=True, help="destination MILDS file")
    g.add_argument("--classes", type=int, default=defaults.num_classes)
    g.add_argument("--bags-per-class", type=int, default=defaults.bags_per_class)
    g.add_argument("--instances-per-bag", type=int, default=defaults.instances_per_bag)
    g.add_argument("--d-in", type=int, default=defaults.d_in)
    g.add_argument("--hallmark-fraction", type=float, default=defaults.hallmark_fraction)
    g.add_argument("--class-separation", type=float, default=defaults.class_separation)
    g.add_argument("--noise-sigma", type=float, default=defaults.noise_sigma)
    g.add_argument("--train-fraction", type=float, default=0.75)
    g.add_argument("--seed", type=int, default=defaults.seed)
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser(
        "run",
        help="run a continual-learning scenario from a config file",
        epilog=CONFIG_HELP + "\n" + SUMMARY_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    r.add_argument("config", help="key=value run configuration")
    r.set_defaults(func=cmd_run)

    p = sub.add_parser(
        "report",
        help="compare completed run directories",
        epilog=SUMMARY_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("run_dirs", nargs="+", help="directories holding summary.csv")
    p.add_argument("-o", "--output", default="comparison.csv", help="comparison CSV path")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ComilError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
