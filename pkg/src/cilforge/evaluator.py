"""Accuracy bookkeeping and report files."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np


class EvaluationError(ValueError):
    pass


def round2(x) -> float:
    """Round half-up to two decimals."""
    return float(Decimal(str(x)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def stage_accuracy(predictions, labels) -> float:
    """Top-1 accuracy in percent."""
    p = np.asarray(predictions).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if p.size == 0 or p.size != y.size:
        raise EvaluationError(f"need equal non-empty inputs, got {p.size} predictions "
                              f"and {y.size} labels")
    correct = int((p == y).sum())
    exact = Decimal(100 * correct) / Decimal(p.size)
    return float(exact.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def summarize(stages) -> tuple[float, float]:
    """(average incremental accuracy, final accuracy)."""
    s = list(stages)
    if not s:
        raise EvaluationError("no stages to summarize")
    avg = sum(Decimal(str(v)) for v in s) / Decimal(len(s))
    return float(avg.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)), float(s[-1])


def format_row(name: str, avg: float, final: float) -> str:
    return f"{name}  {avg:.2f}  {final:.2f}"


@dataclass
class AccuracyMatrix:
    """``per_task[t][j]``: accuracy on task j's classes after task t (j <= t)."""

    stages: list[float] = field(default_factory=list)
    per_task: list[list[float]] = field(default_factory=list)
    seen_classes: list[int] = field(default_factory=list)

    def record(self, predictions, labels, task_of_label, seen: int) -> float:
        p, y = np.asarray(predictions), np.asarray(labels)
        s = stage_accuracy(p, y)
        t = len(self.stages)
        row = []
        for j in range(t + 1):
            mask = task_of_label[y] == j
            row.append(stage_accuracy(p[mask], y[mask]) if mask.any() else 0.0)
        self.stages.append(s)
        self.per_task.append(row)
        self.seen_classes.append(seen)
        return s


@dataclass
class RunReport:
    config: dict
    stages: list[float]
    seen_classes: list[int]
    per_task: list[list[float]]
    avg: float
    final: float
    provenance: dict
    wall_clock: float = 0.0
    schema: str = "cilforge-report v1"

    @classmethod
    def from_matrix(cls, config: dict, matrix: AccuracyMatrix, provenance: dict,
                    wall_clock: float = 0.0) -> RunReport:
        avg, final = summarize(matrix.stages)
        return cls(config, list(matrix.stages), list(matrix.seen_classes),
                   [list(r) for r in matrix.per_task], avg, final, provenance, wall_clock)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stage", "seen_classes", "accuracy"])
        for t, (k, s) in enumerate(zip(self.seen_classes, self.stages)):
            w.writerow([t, k, f"{s:.2f}"])
        w.writerow(["avg", f"{self.avg:.2f}"])
        w.writerow(["final", f"{self.final:.2f}"])
        return buf.getvalue()


REPORT_KEYS = {"config", "stages", "seen_classes", "per_task", "avg", "final",
               "provenance", "wall_clock", "schema"}


def validate_report(obj: dict) -> None:
    """Raise ``EvaluationError`` unless ``obj`` is a well-formed results.json payload."""
    missing = REPORT_KEYS - set(obj)
    if missing:
        raise EvaluationError(f"report missing keys {sorted(missing)}")
    s = obj["stages"]
    if not s or len(s) != len(obj["per_task"]) or len(s) != len(obj["seen_classes"]):
        raise EvaluationError("stage, per-task and seen-class lists disagree in length")
    for t, row in enumerate(obj["per_task"]):
        if len(row) != t + 1 or not all(0 <= v <= 100 for v in row):
            raise EvaluationError(f"per-task row {t} malformed")
    if not all(0 <= v <= 100 for v in s):
        raise EvaluationError("stage accuracy outside [0, 100]")
    avg, final = summarize(s)
    if obj["avg"] != avg or obj["final"] != final:
        raise EvaluationError("avg/final inconsistent with stages")


def emit_report(report: RunReport, out_dir, formats=("json", "csv")) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = {}
    if "json" in formats:
        p = out / "results.json"
        p.write_text(report.to_json() + "\n", encoding="utf-8")
        written["json"] = p
    if "csv" in formats:
        p = out / "results.csv"
        p.write_text(report.to_csv(), encoding="utf-8")
        written["csv"] = p
    return written


def curves_csv(reports: dict[str, RunReport]) -> str:
    """Long-format ``method,stage,seen_classes,accuracy`` rows for plotting."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "stage", "seen_classes", "accuracy"])
    for name, rep in reports.items():
        for t, (k, s) in enumerate(zip(rep.seen_classes, rep.stages)):
            w.writerow([name, t, k, f"{s:.2f}"])
    return buf.getvalue()
