"""``python -m cilforge --config exps/simplecil.json``"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, ConfigFileError, parse_config
from .evaluator import format_row
from .harness import HarnessError, run


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cilforge", description="Run one class-incremental experiment.")
    ap.add_argument("--config", required=True, help="JSON run configuration")
    ap.add_argument("--out", default="./results", help="output directory (default ./results)")
    ap.add_argument("--resume", default=None, help="checkpoint to continue from")
    ap.add_argument("--log-level", default="INFO",
                    choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(args.config)
    except ConfigFileError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    if args.resume is not None:
        if not Path(args.resume).is_file():
            print(f"error: --resume: no such checkpoint: {args.resume}", file=sys.stderr)
            return 2
    try:
        report = run(cfg, args.out, resume=args.resume)
    except (HarnessError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(format_row(report.provenance["learner"], report.avg, report.final))
    return 0


if __name__ == "__main__":
    sys.exit(main())
