"""Command-line interface: one subcommand per named experiment.

Configuration precedence: built-in experiment defaults, then the JSON file
passed with --config, then explicit flags.  The schema is the flat key set
of ExperimentConfig (see README); outputs are results.csv and meta.json in
the directory given by --out.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from typing import Optional

from .harness import DEFAULTS, STATEMENTS, ExperimentConfig, run_experiment


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slfvlab",
        description="Monte Carlo experiments for the SLFV process and its duals",
    )
    sub = parser.add_subparsers(dest="experiment", required=True)
    for name in STATEMENTS:
        sp = sub.add_parser(name, help=STATEMENTS[name])
        sp.add_argument("--config", type=str, default=None,
                        help="JSON file with ExperimentConfig keys")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--replicas", type=int, default=None)
        sp.add_argument("--out", type=str, default=None)
        sp.add_argument("--workers", type=int, default=None)
    return parser


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    data = {"experiment": args.experiment}
    if args.config:
        with open(args.config) as fh:
            file_data = json.load(fh)
        file_data.pop("experiment", None)
        data.update(file_data)
    for key in ("seed", "replicas", "out", "workers"):
        val = getattr(args, key)
        if val is not None:
            data[key] = val
    return ExperimentConfig.from_dict(data)


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    cfg = config_from_args(args)
    t0 = time.time()
    bundle = run_experiment(cfg)
    elapsed = time.time() - t0
    print(f"# {bundle.config.experiment}: {STATEMENTS[bundle.config.experiment]}")
    for line in bundle.to_csv_lines():
        print(line)
    print(f"# elapsed {elapsed:.1f}s  seed {bundle.config.seed}  "
          f"hash {bundle.config.config_hash()}", file=sys.stderr)
    if bundle.config.out:
        print(f"# wrote {bundle.config.out}/results.csv and meta.json", file=sys.stderr)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
