"""Command-line entry point.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from memdyn import pipeline
from memdyn.config import ConfigError, load_config

THREADS_ENV = "MEMDYN_THREADS"

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_INVALID)


def _default_threads() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1")
    return n


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="memdyn",
                     description="Per-sample membership vulnerability dynamics.")
    parser.add_argument("--threads", type=int, default=None,
                        help=f"worker process cap (default: ${THREADS_ENV} or 1)")
    parser.add_argument("-v", "--verbose", action="store_true", help="log stage progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "gen-data": "generate or load the sample pool",
        "train": "train the shadow population and write score logs",
        "attack": "estimate per-sample (FPR, TPR) states",
        "dynamics": "population metrics on the vulnerability plane",
        "hardness": "per-sample hardness metrics",
        "correlate": "correlate hardness with vulnerability",
        "report": "render SVG figures",
        "pipeline": "run every stage in order",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="JSON configuration file")
        p.add_argument("--out", required=True, help="output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        threads = args.threads if args.threads is not None else _default_threads()
        if threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"memdyn: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID

    stages = pipeline.STAGES if args.command == "pipeline" else (args.command,)
    try:
        doc = pipeline.run_pipeline(cfg, args.out, threads, stages)
    except pipeline.StageError as exc:
        print(f"memdyn: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except OSError as exc:
        print(f"memdyn: {exc}", file=sys.stderr)
        return EXIT_FAILED
    summary = {name: doc["stages"][name]["status"] for name in stages}
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
