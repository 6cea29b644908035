"""Command-line interface.

Every subcommand takes the same global flags and executes the pipeline up to
its stage, reusing any artifacts already present in the output directory:

    ptqd run --config experiment.json --out runs/exp1

Exit code 0 on success; failures exit with the failing stage's code
(config 2, train 3, calibrate 4, stats 5, plan 6, sample 7, eval 8,
report 9, io 10).  The PTQD_OUT environment variable overrides --out.
"""

from __future__ import annotations

import argparse
import sys

from .errors import PTQDError, StageError
from .pipeline import (
    STAGE_EXIT_CODES,
    ExperimentConfig,
    resolve_out_dir,
    run_until,
)

_COMMANDS = {
    "train": "train",
    "calibrate": "calibrate",
    "stats": "stats",
    "plan": "plan",
    "sample": "sample",
    "eval": "eval",
    "report": "report",
    "run": "report",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment config JSON")
    common.add_argument("--out", default=None, help="output directory (default from config)")
    common.add_argument(
        "--seed-override",
        type=int,
        default=None,
        metavar="N",
        help="rewrite every named seed from base N (documented offsets)",
    )

    parser = argparse.ArgumentParser(prog="ptqd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "train": "train the toy model (or reuse the checkpoint)",
        "calibrate": "calibrate quantization clipping ranges",
        "stats": "collect quantization-noise statistics",
        "plan": "select per-step bitwidths and recalibrate per step range",
        "sample": "generate samples with the configured corrections",
        "eval": "evaluate samples against held-out data",
        "report": "emit the report JSON and plot CSVs",
        "run": "full pipeline",
    }
    for name in _COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = ExperimentConfig.from_file(args.config)
        if args.seed_override is not None:
            cfg = cfg.override_seeds(args.seed_override)
        out_dir = resolve_out_dir(cfg, args.out)
    except PTQDError as e:
        print(f"error: stage=config code={STAGE_EXIT_CODES['config']}: {e}", file=sys.stderr)
        return STAGE_EXIT_CODES["config"]
    try:
        run_until(cfg, out_dir=out_dir, last=_COMMANDS[args.command])
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except PTQDError as e:
        print(f"error: stage=config code={STAGE_EXIT_CODES['config']}: {e}", file=sys.stderr)
        return STAGE_EXIT_CODES["config"]
    print(f"ok: {args.command} complete, artifacts in {out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
