"""Command line front door: ``attriq explain|evaluate|benchmark|validate --config run.json``."""
from __future__ import annotations

import argparse
import logging
import sys

from .bench import (
    COMMANDS,
    EXIT_COMPUTE,
    EXIT_CONFIG,
    EXIT_INTERNAL,
    EXIT_IO,
    IOFailure,
    load_config,
)
from .data_io import REPORT_FORMATS
from .errors import AttriqError, ConfigError

log = logging.getLogger("attriq")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attriq", description="Generate and score feature attributions.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("explain", "write one attribution report per (instance, explainer)"),
        ("evaluate", "score explanations with the configured metrics"),
        ("benchmark", "explainer x metric comparison matrix"),
        ("validate", "check the config without computing anything"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="run config (JSON)")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--format", choices=REPORT_FORMATS, help="single report format (overrides config)")
        p.add_argument("--jobs", type=int, help="worker threads; falls back to $ATTRIQ_JOBS, then 1")
        p.add_argument("--verbose", "-v", action="count", default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed, out=args.out, fmt=args.format, jobs=args.jobs)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (IOFailure, OSError) as exc:
        log.error("io error: %s", exc)
        return EXIT_IO
    except AttriqError as exc:
        log.error("computation failed: %s", exc)
        return EXIT_COMPUTE
    except Exception:
        log.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
