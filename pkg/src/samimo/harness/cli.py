"""``samimo`` command line: gen-data, train, eval, sweep, plot."""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np
import torch

from samimo.harness import plot as plotting, runner
from samimo.harness.config import ConfigError, load_config
from samimo.training import TrainingError

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC = 0, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="samimo",
        description=f"Semantic-aware MIMO workbench. Default output root: ${runner.OUTPUT_ROOT_ENV} (else ./runs).",
    )
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)
    for name, hlp in [
        ("gen-data", "write train/val/test datasets"),
        ("train", "train every network of the config"),
        ("sweep", "gen-data + train + eval in one go, plus a run record"),
    ]:
        sp = sub.add_parser(name, help=hlp)
        sp.add_argument("config")
    ev = sub.add_parser("eval", help="evaluate saved checkpoints")
    ev.add_argument("config")
    ev.add_argument("--checkpoint", default=None, help="evaluate only this checkpoint")
    pl = sub.add_parser("plot", help="render a results CSV to SVG")
    pl.add_argument("csv")
    pl.add_argument("--figure", required=True, choices=sorted(plotting.FIGURES))
    pl.add_argument("-o", "--output", required=True)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.cmd == "plot":
            print(plotting.plot(args.csv, args.figure, args.output))
            return EXIT_OK
        cfg = load_config(args.config)
        if args.cmd == "gen-data":
            for split, path in runner.gen_dataset(cfg).items():
                print(f"{split}: {path}")
        elif args.cmd == "train":
            runner.train(cfg)
            print(runner.output_dir(cfg) / "checkpoints")
        elif args.cmd == "eval":
            runner.evaluate(cfg, runner.load_models(cfg, args.checkpoint))
            print(runner.output_dir(cfg) / "results.csv")
        elif args.cmd == "sweep":
            rec = runner.run(cfg)
            print(f"{runner.output_dir(cfg) / 'results.csv'} ({rec.wall_clock_s:.0f} s)")
    except ConfigError as exc:
        for path, msg in exc.errors:
            print(f"config error at {path}: {msg}", file=sys.stderr)
        return EXIT_VALIDATION
    # LinAlgError subclasses ValueError, so numeric failures are matched first
    except (TrainingError, ArithmeticError, np.linalg.LinAlgError, torch.linalg.LinAlgError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
