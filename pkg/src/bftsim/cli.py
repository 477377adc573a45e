"""Command-line entry point: ``bftsim run | validate | maps list``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from .edf import parse_edf
from .network import ConfigError, available_maps
from .runner import run_batch


def _load(path: str, seed: int | None, only: str | None):
    specs = parse_edf(path)
    if only is not None:
        specs = [s for s in specs if s.label == only]
        if not specs:
            raise ConfigError(f"{path}: no experiment labelled {only!r}")
    if seed is not None:
        specs = [replace(s, seed=seed, resolved={**s.resolved,
                                                 "misc": {**s.resolved["misc"], "seed": seed}})
                 for s in specs]
    return specs


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="bftsim", description="BFT protocol network simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run every experiment of an EDF file")
    run.add_argument("edf")
    run.add_argument("--out", default="results")
    run.add_argument("--seed", type=int, default=None,
                     help="override the seed of every experiment (files default to 1)")
    run.add_argument("--only", default=None, help="run only the experiment with this label")
    run.add_argument("--parallel", type=int, default=1)

    val = sub.add_parser("validate", help="check an EDF file without running it")
    val.add_argument("edf")

    maps = sub.add_parser("maps", help="latency maps")
    maps.add_argument("action", choices=["list"])

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "maps":
            for name in available_maps():
                print(name)
            return 0
        if args.command == "validate":
            specs = _load(args.edf, None, None)
            for s in specs:
                print(f"ok {s.dirname}")
            return 0
        specs = _load(args.edf, args.seed, args.only)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    status = run_batch(specs, args.out, parallel=max(1, args.parallel))
    print(f"{len(specs)} experiment(s) written to {args.out}" +
          ("" if status == 0 else " (some failed, see batch.log)"))
    return status


if __name__ == "__main__":
    sys.exit(main())
