"""Command-line entry point: ``objprune <stage> [--config FILE] [--set key=value ...]``.

Exit codes are 0 on success, 2 for configuration problems (including a
hash mismatch between stages), 3 when an upstream artifact is missing and
1 for any other library error.
"""
from __future__ import annotations

import argparse
import logging
import sys

from .config import load_config
from .errors import ConfigError, ConfigHashMismatch, MissingArtifact, ObjPruneError
from .pipeline import COMMANDS

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="objprune", description="Planted-teacher visual token pruning pipeline.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="log progress (repeat for debug)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    helps = {
        "gen": "generate train/val/test scenes",
        "extract": "compute oracle importance maps with the planted teacher",
        "train": "fit the importance predictor",
        "search": "search one pruning strategy per budget on the val split",
        "eval": "score all pruning arms on the test split",
        "report": "render the eval CSV as markdown",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", help="JSON run configuration (defaults apply to missing keys)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="replace one existing config leaf; VALUE is parsed as JSON when possible")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        result = COMMANDS[args.command](cfg)
    except (ConfigError, ConfigHashMismatch) as exc:
        print(f"objprune: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        print(f"objprune: missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ObjPruneError as exc:
        print(f"objprune: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    if isinstance(result, str):
        print(result)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
