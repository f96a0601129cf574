"""Command-line entry point: ``mdml {generate,train,evaluate,lodo-sweep,report}``.

Every verb reads an INI config (``--config``; defaults apply when omitted),
applies the command-line overrides, validates, and writes the frozen result to
``<out>/config.<verb>.ini``. Failures exit nonzero after printing a single
JSON line ``{"error": ..., "message": ..., "phase": ...}`` to stderr.
"""
from __future__ import annotations

import argparse
import json
import sys

from . import experiment as ex
from .checkpoint import CheckpointError
from .config import ExperimentConfig, ConfigError, load
from .corpus import CorpusError, TagScheme
from .metrics import MetricError
from .model import ModelError
from .training import TrainingError

EXIT_CONFIG, EXIT_RUN = 2, 1


def _scheme(text: str) -> str:
    try:
        return TagScheme.parse(text).slug
    except CorpusError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


class _Parser(argparse.ArgumentParser):
    """Usage errors also end in the machine-readable error line."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, json.dumps({"error": "UsageError", "message": message, "phase": None}) + "\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI experiment config (defaults are used when omitted)")
    common.add_argument("--seed", type=int, help="override [experiment] seed")
    common.add_argument("--out", help="override [experiment] out (run directory)")
    common.add_argument("--scheme", type=_scheme,
                        help="tag scheme: t-enc|t-dec, optionally +d-enc|+d-dec (e.g. t-dec+d-enc)")
    common.add_argument("--mode", choices=("plain", "aware", "adv", "adversarial"), help="auxiliary task mode")
    common.add_argument("--variant", choices=("mdbl", "sdml", "mdml", "baseline-adapter"))
    common.add_argument("--leave-out", help="leave-out domain (name or index)")
    common.add_argument("--topk", type=int, help="domain tokens per domain for the F1 metric")

    parser = _Parser(prog="mdml", description="Multi-domain multilingual NMT desk experiments")
    sub = parser.add_subparsers(dest="verb", required=True)
    sub.add_parser("generate", parents=[common], help="write synthetic corpora, test sets and the condition file")
    p = sub.add_parser("train", parents=[common], help="run the configured training phases")
    p.add_argument("--max-steps", type=int, help="stop after this many optimizer steps (resume by rerunning)")
    p = sub.add_parser("evaluate", parents=[common], help="decode the test sets and write report tables")
    p.add_argument("--checkpoint", help="checkpoint to evaluate (default: last configured phase)")
    p = sub.add_parser("lodo-sweep", parents=[common], help="train/evaluate the variant grid per leave-out domain")
    p.add_argument("--max-steps", type=int, help=argparse.SUPPRESS)
    sub.add_parser("report", parents=[common], help="re-render tables from stored evaluation statistics")
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = load(args.config) if args.config else ExperimentConfig()
    cfg = cfg.with_overrides(seed=args.seed, out=args.out, scheme=args.scheme, variant=args.variant,
                             topk=args.topk, mode=args.mode, leave_out=args.leave_out)
    return cfg.validate()


def _fail(kind: str, message: str, code: int, phase=None) -> int:
    print(json.dumps({"error": kind, "message": message, "phase": phase}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.verb == "generate":
            ex.cmd_generate(cfg)
        elif args.verb == "train":
            ex.cmd_train(cfg, max_steps=args.max_steps)
        elif args.verb == "evaluate":
            ex.cmd_evaluate(cfg, args.checkpoint)
        elif args.verb == "lodo-sweep":
            ex.cmd_lodo_sweep(cfg, max_steps=args.max_steps)
        elif args.verb == "report":
            ex.cmd_report(cfg)
    except (ConfigError, CorpusError) as exc:
        return _fail(type(exc).__name__, str(exc), EXIT_CONFIG)
    except ex.ExperimentError as exc:
        return _fail("ExperimentError", str(exc), EXIT_RUN, exc.phase)
    except (TrainingError, ModelError, MetricError, CheckpointError, OSError) as exc:
        return _fail(type(exc).__name__, str(exc), EXIT_RUN)
    return 0


if __name__ == "__main__":
    sys.exit(main())
