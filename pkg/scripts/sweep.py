"""Run several configs and collect their accuracy curves.

    python scripts/sweep.py exps/*.json --out results/sweep
"""

from __future__ import annotations

import argparse
import logging
from pathlib import Path

from cilforge.config import parse_config
from cilforge.evaluator import curves_csv, format_row
from cilforge.harness import run


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("configs", nargs="+")
    ap.add_argument("--out", default="results/sweep")
    ap.add_argument("--log-level", default="WARNING")
    args = ap.parse_args()
    logging.basicConfig(level=args.log_level)

    out = Path(args.out)
    reports = {}
    for path in args.configs:
        cfg = parse_config(path)
        tag = Path(path).stem
        rep = run(cfg, out / tag, checkpoint=False)
        reports[rep.provenance["learner"]] = rep
        print(format_row(rep.provenance["learner"], rep.avg, rep.final), f"({rep.wall_clock:.1f}s)",
              flush=True)
    (out / "curves.csv").write_text(curves_csv(reports), encoding="utf-8")
    print(f"wrote {out / 'curves.csv'}")


if __name__ == "__main__":
    main()
