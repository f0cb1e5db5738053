"""``trgs`` command line: run experiments, validation suites and the VR-vs-plain bench."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import parse_config
from .errors import ConfigError, InvalidArgument, TrgsError
from .harness import bench_vr_vs_plain, run_experiment
from .validation import SUITES, resolve_selector, run_validation_suite

EXIT_OK, EXIT_RUN, EXIT_CONFIG, EXIT_VALIDATION = 0, 1, 2, 3


def _load(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text)


def _positive_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _positive_float(s):
    v = float(s)
    if not v > 0:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="trgs", description="Stochastic trust-region experiments.")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment config over its seeds")
    run.add_argument("--config", required=True)
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--seed-override", type=int, action="append",
                     help="run only this seed (repeatable); replaces the config's seeds")
    run.add_argument("--jobs", type=_positive_int, default=1)
    run.add_argument("--budget-multiplier", type=_positive_float, default=1.0)
    run.add_argument("--smooth", type=_positive_int, default=None, help="also write a block-averaged aggregate")

    val = sub.add_parser("validate", help="run invariant suites")
    val.add_argument("--suite", default="all", help=f"all or a comma list of: {', '.join(SUITES)}")

    bench = sub.add_parser("bench", help="matched-sample comparison of a VR config against plain minibatches")
    bench.add_argument("--config", required=True)
    bench.add_argument("--budget-multiplier", type=_positive_float, default=1.0)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        if args.command == "validate":
            try:
                resolve_selector(args.suite)
            except InvalidArgument as exc:
                ap.error(str(exc))
            return run_validation_suite(args.suite)
        cfg = _load(args.config)
        if args.command == "run":
            if args.seed_override:
                cfg = cfg.with_seeds(args.seed_override)
            return run_experiment(cfg, args.out, args.jobs, args.budget_multiplier, args.smooth)
        res = bench_vr_vs_plain(cfg, args.budget_multiplier)
        print("iter,vr_samples,vr_error,plain_samples,plain_error")
        for i, row in enumerate(zip(res.vr_samples, res.vr_error, res.plain_samples, res.plain_error), 1):
            print(f"{i},{row[0]:.1f},{row[1]:.6e},{row[2]:.1f},{row[3]:.6e}")
        print(f"# {res.seeds} seeds, plain batch {res.plain_batch}; "
              f"VR error below plain at {100 * res.fraction_below:.1f}% of iterations", file=sys.stderr)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrgsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
