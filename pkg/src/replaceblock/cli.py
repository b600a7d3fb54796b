"""Command line entry point: ``replaceblock {train,compare,sweep}``.

Settings resolve as flag > config file > built-in default.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .data import DatasetError
from .experiment import (
    PRESETS,
    ExperimentConfig,
    compare_runs,
    format_summary,
    run_experiment,
    run_sweep,
    summary_csv,
)
from .regularizers import KINDS

log = logging.getLogger("replaceblock")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON experiment config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--dataset", choices=("cifar10", "mnist", "synthetic"))
    p.add_argument("--dataset-dir", type=str)
    p.add_argument("--epochs", type=int)
    p.add_argument("--subset-size", type=int, help="class-balanced training subset (0 = all)")
    p.add_argument("--test-subset-size", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.out is not None:
        cfg.out_dir = str(args.out)
    if args.dataset is not None:
        cfg.dataset.kind = args.dataset
    if args.dataset_dir is not None:
        cfg.dataset.dir = args.dataset_dir
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    if args.subset_size is not None:
        cfg.dataset.subset_size = args.subset_size
    if args.test_subset_size is not None:
        cfg.dataset.test_subset_size = args.test_subset_size
    if args.batch_size is not None:
        cfg.train.batch_size = args.batch_size
    if getattr(args, "regularizer", None):
        cfg.regularizer = {"kind": args.regularizer}
    # re-run validation after overrides
    return ExperimentConfig.from_dict(cfg.to_dict())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="replaceblock", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train one model")
    _common(train)
    train.add_argument("--regularizer", choices=KINDS)

    cmp_ = sub.add_parser("compare", help="summarize completed runs")
    cmp_.add_argument("runs", nargs="+", type=Path)
    cmp_.add_argument("--csv", type=Path, help="also write the summary as CSV")

    sweep = sub.add_parser("sweep", help="run an ablation preset")
    sweep.add_argument("preset", choices=sorted(PRESETS))
    _common(sweep)
    sweep.add_argument("--jobs", type=int, default=1, help="parallel runs (separate processes)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(asctime)s %(levelname)s %(message)s",
    )
    try:
        if args.command == "train":
            out = run_experiment(resolve_config(args))
            print(out)
        elif args.command == "compare":
            summaries, skipped = compare_runs(args.runs)
            print(format_summary(summaries, skipped))
            if args.csv:
                args.csv.write_text(summary_csv(summaries))
        elif args.command == "sweep":
            cfg = resolve_config(args)
            root = args.out or Path(cfg.out_dir)
            run_sweep(args.preset, cfg, root, args.jobs)
            print((Path(root) / "summary.txt").read_text(), end="")
    except DatasetError as exc:
        print(f"error: dataset: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
