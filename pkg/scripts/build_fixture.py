"""Write the 20-class blob fixture as CLDS files and measure it.

The ordering thresholds used by the acceptance suite were read off this
script's output once and then pinned there.
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

from cilforge.config import parse_config_dict
from cilforge.datastream import synth_blobs, write_table_dataset
from cilforge.harness import run

FIXTURE = {"name": "blobs", "num_classes": 20, "per_class": 20, "test_per_class": 10, "dim": 32,
           "spread": 0.5, "seed": 0}
METHODS = ("finetune", "icarl", "der", "foster", "simplecil")


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="results/fixture")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    pair = synth_blobs(FIXTURE["num_classes"], FIXTURE["per_class"], FIXTURE["dim"],
                       spread=FIXTURE["spread"], seed=FIXTURE["seed"],
                       test_per_class=FIXTURE["test_per_class"])
    write_table_dataset(pair.train, out / "train.clds")
    write_table_dataset(pair.test, out / "test.clds")

    stats = {}
    for name in METHODS:
        cfg = parse_config_dict({"model_name": name, "init_cls": 4, "increment": 4,
                                 "dataset": FIXTURE, "memory_size": 80})
        rep = run(cfg, checkpoint=False)
        stats[name] = {"avg": rep.avg, "final": rep.final, "seconds": round(rep.wall_clock, 1)}
        print(name, stats[name], flush=True)
    others = min(v["final"] for k, v in stats.items() if k in ("icarl", "der", "foster"))
    stats["finetune_margin"] = round(others - stats["finetune"]["final"], 2)
    (out / "stats.json").write_text(json.dumps(stats, indent=2) + "\n", encoding="utf-8")
    print("finetune margin", stats["finetune_margin"])


if __name__ == "__main__":
    main()
