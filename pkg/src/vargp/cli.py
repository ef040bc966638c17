"""Command-line entry point.

    vargp run <config.json>
    vargp eval <checkpoint> <config.json>
    vargp dump-inducing <checkpoint> <out_dir>

Progress and results go to stdout as one JSON object per line; failures
print a JSON ``error`` record to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import checkpoint
from .errors import CheckpointError, ConfigError, DataFormatError, NonFiniteError, VargpError
from .evaluation import export_inducing
from .experiment import ExperimentConfig, build_stream, evaluate_checkpoint, run_experiment

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_CHECKPOINT = 5


def _out(record: dict) -> None:
    print(json.dumps(record, sort_keys=True), flush=True)


def _fail(kind: str, exc: Exception, code: int) -> int:
    record = {"event": "error", "kind": kind, "message": str(exc)}
    if isinstance(exc, NonFiniteError):
        record["dump"] = exc.dump
    print(json.dumps(record, sort_keys=True, default=str), file=sys.stderr, flush=True)
    return code


def cmd_run(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    _, report, run_dir = run_experiment(cfg, log=print_line)
    _out({"event": "done", "run_dir": str(run_dir), "config_digest": cfg.digest(),
          "tasks_trained": report.rows_filled()})
    return 0


def cmd_eval(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    state = checkpoint.load(args.checkpoint)
    result = evaluate_checkpoint(state, build_stream(cfg), cfg.eval_samples, cfg.seed)
    _out({"event": "eval", **result})
    return 0


def cmd_dump(args) -> int:
    state = checkpoint.load(args.checkpoint)
    out = export_inducing(state, args.out_dir)
    _out({"event": "dump_inducing", "out_dir": str(out), "num_tasks": state.num_tasks})
    return 0


def print_line(line: str) -> None:
    print(line, flush=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vargp", description="Continual GP classification experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="train a task stream from a JSON config")
    p.add_argument("config")
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("eval", help="evaluate a checkpoint on the configured stream")
    p.add_argument("checkpoint")
    p.add_argument("config")
    p.set_defaults(func=cmd_eval)
    p = sub.add_parser("dump-inducing", help="export inducing inputs from a checkpoint as CSV")
    p.add_argument("checkpoint")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_dump)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail("config", exc, EXIT_CONFIG)
    except (DataFormatError, FileNotFoundError) as exc:
        return _fail("data", exc, EXIT_DATA)
    except CheckpointError as exc:
        return _fail("checkpoint", exc, EXIT_CHECKPOINT)
    except (NonFiniteError, ArithmeticError) as exc:
        return _fail("numerical", exc, EXIT_NUMERIC)
    except VargpError as exc:
        return _fail("error", exc, 1)


if __name__ == "__main__":
    sys.exit(main())
