"""Command-line surface: train | unlearn | relearn | diagnose | classify |
probe | report.

Exit codes: 0 success, 1 validation error (config, file format, missing
inputs), 2 numerical failure. Errors print a human-readable line and a
machine-readable JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys

from .checkpoint import CheckpointError
from .config import ConfigError
from .dump import DumpFormatError
from .fileio import canonical_json
from .linalg import LinalgError
from .model import ModelError
from . import runner

VALIDATION_EXIT = 1
NUMERICAL_EXIT = 2


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unlearn-lens",
        description="Desk-scale laboratory for the reversibility of machine unlearning",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train the base model into a run directory")
    train.add_argument("--config", required=True)
    train.add_argument("--run-dir", required=True)

    for name, help_text in [
        ("unlearn", "apply the configured unlearning protocol"),
        ("relearn", "run the budget-limited relearning phase"),
        ("classify", "compute the forgetting-regime verdict"),
        ("report", "emit metrics and plot-data CSVs"),
    ]:
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--run-dir", required=True)

    diagnose = sub.add_parser(
        "diagnose", help="representation diagnostics for a run or a dump pair"
    )
    diagnose.add_argument("--run-dir")
    diagnose.add_argument("--orig", help="ULNS dump of the original model")
    diagnose.add_argument("--upd", help="ULNS dump of the updated model")
    diagnose.add_argument("--out", help="output JSON path for dump-pair mode")

    probe = sub.add_parser("probe", help="weight-perturbation sweep on a checkpoint")
    probe.add_argument("--run-dir", required=True)
    probe.add_argument("--checkpoint", default="theta0")

    return parser


def _dispatch(args: argparse.Namespace) -> int:
    if args.command == "train":
        runner.cmd_train(args.config, args.run_dir)
        print(f"trained base model into {args.run_dir}")
    elif args.command == "unlearn":
        runner.cmd_unlearn(args.run_dir)
        print("unlearning phase complete")
    elif args.command == "relearn":
        runner.cmd_relearn(args.run_dir)
        print("relearning phase complete")
    elif args.command == "diagnose":
        if args.orig or args.upd:
            if not (args.orig and args.upd):
                raise ConfigError("dump-pair mode needs both --orig and --upd")
            payload = runner.cmd_diagnose_dumps(args.orig, args.upd, args.out)
            print(canonical_json(payload), end="")
        else:
            if not args.run_dir:
                raise ConfigError("diagnose needs --run-dir or --orig/--upd")
            runner.cmd_diagnose(args.run_dir)
            print("diagnostics written")
    elif args.command == "classify":
        print(runner.cmd_classify(args.run_dir))
    elif args.command == "probe":
        runner.cmd_probe(args.run_dir, args.checkpoint)
        print("probe report written")
    elif args.command == "report":
        runner.cmd_report(args.run_dir)
        print("report CSVs written")
    else:  # pragma: no cover - argparse enforces the choices
        raise ConfigError(f"unknown command {args.command!r}")
    return 0


def _emit_error(kind: str, err: Exception, code: int) -> int:
    payload = {"error": kind, "message": str(err)}
    field = getattr(err, "field_path", "")
    if field:
        payload["field"] = field
    dump_code = getattr(err, "code", "")
    if dump_code:
        payload["code"] = dump_code
    print(f"error: {err}", file=sys.stderr)
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        return _dispatch(args)
    except (ConfigError, DumpFormatError, CheckpointError, FileNotFoundError) as err:
        return _emit_error("validation", err, VALIDATION_EXIT)
    except (ModelError, LinalgError) as err:
        return _emit_error("numerical", err, NUMERICAL_EXIT)


if __name__ == "__main__":
    sys.exit(main())
