"""``hypercare`` command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 runtime error, 4 failed
gradient check.  Failures print one JSON record on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .errors import ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECK = 0, 2, 3, 4

COMMANDS = ("generate", "pretrain", "finetune", "evaluate", "run-all", "grad-check", "ablate")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-path override, e.g. train.mu=0.3 (repeatable)")
    common.add_argument("--out", metavar="DIR", help="output directory (HYPERCARE_OUT takes precedence)")
    common.add_argument("--seed", type=int, metavar="N", help="run seed")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    parser = _Parser(prog="hypercare", description="Hypergraph transformer pretrain/finetune pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def _error_record(exc: BaseException, code: int) -> str:
    return json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}, sort_keys=True)


def _run(args) -> int:
    if args.command == "grad-check":
        # validated for consistency with the other commands; the instance itself is fixed
        pipeline.parse_config(args.config, args.overrides, args.out, args.seed)
        err = pipeline.grad_check()
        print(f"grad_check max_rel_err={float(err)!r}")
        return EXIT_OK if err <= pipeline.GRAD_TOL else EXIT_CHECK

    cfg = pipeline.parse_config(args.config, args.overrides, args.out, args.seed)
    if args.command == "generate":
        stats = pipeline.stage_generate(cfg)
        print(json.dumps(stats, sort_keys=True))
    elif args.command == "pretrain":
        pipeline.write_resolved_config(cfg)
        result = pipeline.stage_pretrain(cfg)
        print(json.dumps({"stage": "pretrain", "final_loss": result.losses[-1] if result.losses else None}))
    elif args.command == "finetune":
        pipeline.write_resolved_config(cfg)
        result = pipeline.stage_finetune(cfg)
        print(json.dumps({"stage": "finetune", "best_iter": result.best_iter}))
    elif args.command == "evaluate":
        csv_path, _ = pipeline.stage_evaluate(cfg)
        print(csv_path.read_text(encoding="utf-8"), end="")
    elif args.command == "ablate":
        pipeline.write_resolved_config(cfg)
        csv_path, _ = pipeline.stage_ablate(cfg)
        print(csv_path.read_text(encoding="utf-8"), end="")
    elif args.command == "run-all":
        artifacts = pipeline.run_all(cfg)
        print(json.dumps({k: str(v) for k, v in artifacts.items()}, sort_keys=True))
    return EXIT_OK


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(_error_record(exc, EXIT_CONFIG), file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        return _run(args)
    except ConfigError as exc:
        print(_error_record(exc, EXIT_CONFIG), file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every failure becomes one machine-readable line
        print(_error_record(exc, EXIT_RUNTIME), file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
