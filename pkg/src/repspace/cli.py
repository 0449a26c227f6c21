"""``repspace`` command line: train, evaluate, sweep, distill-init, overcluster-report.

Exit codes: 0 success, 1 validation error, 2 runtime failure, 3 sweep finished
with failed points.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from repspace import config as cfgmod
from repspace import harness
from repspace.config import ConfigError, RunConfig
from repspace.embio import FormatError
from repspace.numerics import CheckpointError

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_PARTIAL = 0, 1, 2, 3

log = logging.getLogger("repspace")


def _load_config(path, args) -> RunConfig:
    config = cfgmod.load(path) if path else RunConfig()
    if getattr(args, "seed", None) is not None:
        config = replace(config, seed=args.seed)
    if getattr(args, "deterministic", False):
        config = replace(config, deterministic=True)
    if getattr(args, "out", None):
        config = replace(config, out=args.out)
    return config.validate()


def cmd_train(args) -> int:
    config = _load_config(args.config, args)
    _, out = harness.run_train(config)
    print(f"wrote {out / harness.CHECKPOINT}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    config = _load_config(args.config, args)
    out = Path(args.out or Path(config.out) / "eval")
    report = harness.run_evaluate(args.checkpoint, args.dataset, config.eval, out, key=args.key)
    print((out / "metrics.md").read_text(encoding="utf-8"), end="")
    return EXIT_OK if report else EXIT_RUNTIME


def cmd_sweep(args) -> int:
    grid = cfgmod.load_grid(args.grid)
    if args.seed is not None:
        grid = replace(grid, base=replace(grid.base, seed=args.seed))
    if args.deterministic:
        grid = replace(grid, base=replace(grid.base, deterministic=True))
    grid.points()  # cap check before any work
    out = Path(args.out or grid.base.out)
    result = harness.run_sweep(grid, out, workers=args.workers)
    print((out / "sweep.md").read_text(encoding="utf-8"), end="")
    return EXIT_PARTIAL if result.n_failed else EXIT_OK


def cmd_distill_init(args) -> int:
    config = _load_config(args.config, args)
    _, out = harness.run_distill_init(args.teacher, args.epochs, config)
    print(f"wrote {out / harness.CHECKPOINT}")
    return EXIT_OK


def cmd_overcluster_report(args) -> int:
    small = _load_config(args.small, args) if args.small else harness.small_preset()
    large = _load_config(args.large, args) if args.large else harness.large_preset()
    if args.seed is not None:
        small, large = replace(small, seed=args.seed), replace(large, seed=args.seed)
    out = Path(args.out or "overcluster")
    report = harness.run_overcluster_report(small, large, out, args.align_band, args.intra_margin)
    print(report.render())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="repspace", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="run configuration file (key = value)")
        p.add_argument("--seed", type=int)
        p.add_argument("--deterministic", action="store_true", help="single-threaded, bit-reproducible")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("train", help="contrastive training run")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="metric row for a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="dataset.manifest written by train")
    p.add_argument("--key", default="", help="run key recorded in the report row")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="grid of train+evaluate runs")
    common(p, config=False)
    p.add_argument("--grid", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("distill-init", help="SEED-distilled initialization checkpoint")
    common(p)
    p.add_argument("--teacher", required=True)
    p.add_argument("--epochs", type=int, required=True)
    p.set_defaults(func=cmd_distill_init)

    p = sub.add_parser("overcluster-report", help="small vs large encoder comparison")
    common(p, config=False)
    p.add_argument("--small", help="config of the capacity-limited run (default: built-in preset)")
    p.add_argument("--large", help="config of the larger run (default: built-in preset)")
    p.add_argument("--align-band", type=float, default=0.1)
    p.add_argument("--intra-margin", type=float, default=0.02)
    p.set_defaults(func=cmd_overcluster_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        for err in exc.errors:
            print(f"config error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except (FormatError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:
        log.debug("run failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
