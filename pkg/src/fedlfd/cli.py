"""Command-line entry point: ``fedlfd run|validate|inspect-checkpoint``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import checkpoint
from .config import PRESETS, load
from .errors import ConfigError, NumericError, UsageError
from .harness import run

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedlfd", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run a scenario and write metrics/checkpoints")
    r.add_argument("--config", required=True,
                   help=f"TOML config path or preset name ({', '.join(PRESETS)})")
    r.add_argument("--seed", type=int)
    r.add_argument("--out", default="out")
    r.add_argument("--rounds", type=int)
    v = sub.add_parser("validate", help="check a config and report every problem")
    v.add_argument("--config", required=True)
    i = sub.add_parser("inspect-checkpoint", help="print a checkpoint summary as JSON")
    i.add_argument("path")
    return p


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "inspect-checkpoint":
            print(json.dumps(checkpoint.describe(args.path), indent=2, sort_keys=True))
            return EXIT_OK
        cfg = load(args.config)
        if args.command == "validate":
            print(f"{args.config}: ok ({len(cfg.platforms)} platforms, {len(cfg.models)} models, "
                  f"{len(cfg.teachers)} teachers)")
            return EXIT_OK
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed)
        if args.rounds is not None:
            if args.rounds < 1:
                raise ConfigError("--rounds must be >= 1")
            cfg = cfg.replace(rounds=args.rounds)
        _, reports = run(cfg, args.out)
        last = reports[-1]
        print(json.dumps({"rounds": len(reports), "global_loss": {str(k): v for k, v in
                                                                 last.global_loss.items()},
                          "out": args.out}, sort_keys=True))
        return EXIT_OK
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
