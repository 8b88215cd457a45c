"""Command-line entry point: run, compare, partition-inspect, poison-preview."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import attack as atk
from . import experiment as ex
from .config import ExperimentConfig, build_config

log = logging.getLogger("sybilpoison")


def _add_config_flags(parser):
    parser.add_argument("--config", type=Path, help="key = value config file")
    group = parser.add_argument_group("config overrides")
    for f in fields(ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        group.add_argument(flag, dest=f"cfg_{f.name}", default=None, metavar=f.type.upper(),
                           help=f"(default: {f.default})")


def _config_from(args) -> ExperimentConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return build_config(args.config, overrides)


def cmd_run(args):
    config = _config_from(args)

    def progress(state):
        rec = state.history[-1]
        tta = "n/a" if rec.tta is None else f"{rec.tta:.4f}"
        log.info("round %d  mta %.4f  tta %s  loss %.4f", rec.round, rec.mta, tta, rec.train_loss)

    out = ex.run_experiment(config, progress)
    print(out)
    return 0


def cmd_compare(args):
    _, table = ex.compare_runs(args.runs, args.out)
    print(ex.format_table(table), end="")
    return 0


def cmd_partition_inspect(args):
    config = _config_from(args)
    hist = ex.partition_histograms(config)
    header = "client " + " ".join(f"{c:>6}" for c in range(hist.shape[1])) + "   total"
    print(header)
    for k, row in enumerate(hist):
        print(f"{k:>6} " + " ".join(f"{n:>6}" for n in row) + f"  {row.sum():>6}")
    return 0


def cmd_poison_preview(args):
    path = Path(args.source)
    if path.is_dir():
        path = path / ex.POISON_FILE
    batch = atk.load_poison(path)
    linf = float(np.abs(batch.delta).max()) if len(batch) else 0.0
    print(f"images: {len(batch)}  shape: {batch.images.shape[1:]}  labels: {sorted(set(batch.labels.tolist()))}")
    print(f"max |delta|: {linf:.6f}")
    if batch.trace:
        print(f"trace: {len(batch.trace)} values, first {batch.trace[0]:.6f}, last {batch.trace[-1]:.6f}")
        if args.trace:
            for t, b in enumerate(batch.trace):
                print(f"{t}\t{b:.6f}")
    if args.svg:
        Path(args.svg).write_text(ex.poison_preview_svg(batch, args.count))
        print(f"wrote {args.svg}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="sybilpoison", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment and write its result directory")
    _add_config_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="overlay runs and tabulate final MTA/TTA")
    p.add_argument("runs", nargs="+", type=Path)
    p.add_argument("--out", type=Path, default=None, help="directory for compare.svg / compare.csv")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("partition-inspect", help="print per-client class histograms")
    _add_config_flags(p)
    p.set_defaults(func=cmd_partition_inspect)

    p = sub.add_parser("poison-preview", help="summarise a poison container")
    p.add_argument("source", help="run directory or poison.bin path")
    p.add_argument("--svg", help="write base vs poisoned image grid here")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--trace", action="store_true", help="print the full loss trace")
    p.set_defaults(func=cmd_poison_preview)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
