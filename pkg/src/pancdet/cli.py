"""Command line entry point: ``pancdet gen-data | train | eval | ablate``."""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import atomic_write_text, generate_dataset, load_split, resolve_data_dir
from .evaluation import ablation_csv, evaluate_model, run_ablation
from .training import train

log = logging.getLogger("pancdet")


class CliError(Exception):
    """Expected user-facing failure, reported as a single stderr line."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _load_config(path: str | None, **overrides) -> RunConfig:
    cfg = RunConfig()
    if path:
        p = Path(path)
        if not p.is_file():
            raise CliError(f"config file not found: {p}")
        cfg = RunConfig.from_text(p.read_text())
    changes = {k: v for k, v in overrides.items() if v is not None}
    return cfg.replace(**changes) if changes else cfg


def _load(data: str | None, split: str):
    root = resolve_data_dir(data)
    if not root.is_dir():
        raise CliError(f"data directory not found: {root}")
    return load_split(root, split)


def cmd_gen_data(args) -> int:
    out = generate_dataset(args.out, args.train, args.test, args.tumor_fraction, args.seed)
    print(f"wrote {args.train} train / {args.test} test scans to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config, iterations=args.iterations, seed=args.seed)
    samples = _load(args.data, "train")
    t0 = time.perf_counter()
    model, state = train(samples, cfg)
    save_checkpoint(model, args.out, state.iteration)
    print(f"trained {state.iteration} iterations in {time.perf_counter() - t0:.1f}s; checkpoint {args.out}")
    return 0


def cmd_eval(args) -> int:
    expected = _load_config(args.config) if args.config else None
    model, manifest = load_checkpoint(args.ckpt, expected)
    samples = _load(args.data, args.split)
    report = evaluate_model(model, samples)
    atomic_write_text(args.report, report.report_csv())
    if args.roc:
        atomic_write_text(args.roc, report.roc_csv())
    if args.froc:
        atomic_write_text(args.froc, report.froc_csv())
    for key, value in report.summary_rows():
        print(f"{key}: {value}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args.config, iterations=args.iterations)
    train_s, test_s = _load(args.data, "train"), _load(args.data, "test")
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    runs = []
    for seed in seeds:
        log.info("ablation seed %d", seed)
        runs.append(run_ablation(train_s, test_s, cfg.replace(seed=seed)))
    atomic_write_text(args.out, ablation_csv(runs, seeds))
    print(Path(args.out).read_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pancdet", description="Pancreatic tumor detector on synthetic CT-like scans.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic train/test dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--train", type=int, default=200)
    g.add_argument("--test", type=int, default=60)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--tumor-fraction", type=float, default=0.75)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a detector and write a checkpoint")
    t.add_argument("--data", help="dataset directory (default: $PANCDET_DATA_DIR)")
    t.add_argument("--config")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--iterations", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on the test split")
    e.add_argument("--data")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--config", help="refuse the checkpoint unless its topology matches this config")
    e.add_argument("--split", default="test")
    e.add_argument("--report", required=True)
    e.add_argument("--roc")
    e.add_argument("--froc")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and score the six component configurations")
    a.add_argument("--data")
    a.add_argument("--config")
    a.add_argument("--out", required=True)
    a.add_argument("--seeds", help="comma separated seeds (default: the config seed)")
    a.add_argument("--iterations", type=int)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except CliError as exc:
        print(f"pancdet: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (CliError, CheckpointError, FileNotFoundError, ValueError, OSError, FloatingPointError) as exc:
        print(f"pancdet: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
