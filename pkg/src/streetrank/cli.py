"""Command line entry point.

    streetrank <stage> --config experiment.yaml [--seed N] [--out DIR]
                       [--full-grid] [--workers N] [--max-units N]

Stages: synth, featurize, train, evaluate, report, serve. Exit codes:
0 success, 2 config problem, 3 pipeline failure (missing inputs, failed
unit, corrupt artifact).

``STREETRANK_OUT`` overrides the output directory and ``STREETRANK_PORT``
the serve port, below the equivalent flags.
"""
from __future__ import annotations

import argparse
import dataclasses
import os
import sys

from . import pipeline
from .pipeline import ConfigError, PipelineError
from .store import StoreError

STAGES = ("synth", "featurize", "train", "evaluate", "report", "serve")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PIPELINE = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="streetrank",
        description="alert ranking experiments: generate data, featurize, "
                    "train a model grid, evaluate, report, serve")
    sub = parser.add_subparsers(dest="stage", required=True)
    for stage in STAGES:
        cmd = sub.add_parser(stage)
        cmd.add_argument("--config", required=True, help="experiment YAML")
        cmd.add_argument("--seed", type=int, default=None,
                         help="override the config seed")
        cmd.add_argument("--out", default=None,
                         help="override the output directory")
        cmd.add_argument("--full-grid", action="store_true",
                         help="use the published hyperparameter grid")
        if stage == "train":
            cmd.add_argument("--workers", type=int, default=None,
                             help="worker pool size (results are identical "
                                  "for any value)")
            cmd.add_argument("--max-units", type=int, default=None,
                             help="stop after N units; rerun to resume")
        if stage == "serve":
            cmd.add_argument("--port", type=int, default=None,
                             help="override the serve port")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    out = args.out if args.out is not None else os.environ.get("STREETRANK_OUT")
    try:
        cfg = pipeline.load_config(args.config, seed=args.seed, out_dir=out,
                                   use_full_grid=args.full_grid)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if args.stage == "synth":
            where = pipeline.cmd_synth(cfg)
            print(f"corpus ready at {where}")
        elif args.stage == "featurize":
            where = pipeline.cmd_featurize(cfg)
            print(f"features ready at {where}")
        elif args.stage == "train":
            done = pipeline.cmd_train(cfg, max_units=args.max_units,
                                      workers=args.workers)
            print(f"trained {done} units (run {cfg.run_id})")
        elif args.stage == "evaluate":
            where = pipeline.cmd_evaluate(cfg)
            print(f"reports written to {where}")
        elif args.stage == "report":
            where = pipeline.cmd_report(cfg)
            print(where.read_text(encoding="utf-8"), end="")
        elif args.stage == "serve":
            port = args.port if args.port is not None else \
                os.environ.get("STREETRANK_PORT")
            if port is not None:
                serve = dataclasses.replace(cfg.serve, port=int(port))
                cfg = dataclasses.replace(cfg, serve=serve)
            pipeline.cmd_serve(cfg)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (PipelineError, StoreError) as err:
        print(f"pipeline error: {err}", file=sys.stderr)
        return EXIT_PIPELINE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
