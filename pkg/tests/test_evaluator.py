import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cilforge.evaluator import (AccuracyMatrix, EvaluationError, RunReport, curves_csv, emit_report,
                                format_row, round2, stage_accuracy, summarize, validate_report)


def test_stage_accuracy_examples():
    assert stage_accuracy([1, 2, 3], [1, 2, 3]) == 100.0
    assert stage_accuracy([1, 0, 1], [1, 1, 1]) == 66.67
    assert stage_accuracy([0, 0], [1, 1]) == 0.0


def test_stage_accuracy_empty():
    with pytest.raises(EvaluationError):
        stage_accuracy([], [])


def test_round_half_up():
    assert round2(0.125) == 0.13 and round2(2.675) == 2.68
    # 1/8 of 100 = 12.5 exactly; 1/3 rounds down
    assert stage_accuracy([1] + [0] * 7, [1] * 8) == 12.5
    assert stage_accuracy([1, 0, 0], [1, 1, 1]) == 33.33


def test_summarize_examples():
    assert summarize([90, 80, 70]) == (80.0, 70.0)
    assert summarize([55.55]) == (55.55, 55.55)


def test_format_row():
    assert format_row("FOSTER", 91.48, 87.92) == "FOSTER  91.48  87.92"


@given(st.lists(st.floats(0, 100).map(round2), min_size=1, max_size=20))
def test_average_between_extremes(stages):
    avg, final = summarize(stages)
    assert min(stages) <= avg <= max(stages) and final == stages[-1]


def _report(stages):
    m = AccuracyMatrix()
    task_of = np.repeat(np.arange(len(stages)), 2)
    r = np.random.default_rng(1)
    for t in range(len(stages)):
        y = np.arange(2 * (t + 1))
        m.record(np.where(r.uniform(size=y.size) < 0.7, y, 0), y, task_of, len(y))
    return RunReport.from_matrix({"model_name": "x"}, m, {"seed": 1993})


def test_matrix_is_lower_triangular():
    rep = _report([0] * 4)
    assert [len(r) for r in rep.per_task] == [1, 2, 3, 4]
    assert all(0 <= v <= 100 for r in rep.per_task for v in r)


def test_json_round_trip(tmp_path):
    rep = _report([0] * 5)
    paths = emit_report(rep, tmp_path)
    back = json.loads(paths["json"].read_text())
    validate_report(back)
    assert back["avg"] == rep.avg and back["final"] == rep.final


def test_csv_layout(tmp_path):
    rep = _report([0] * 10)
    rows = list(csv.reader(io.StringIO(emit_report(rep, tmp_path)["csv"].read_text())))
    assert rows[0] == ["stage", "seen_classes", "accuracy"]
    assert len(rows) - 1 == 12
    assert rows[-2][0] == "avg" and rows[-1][0] == "final"


def test_validate_rejects_inconsistent():
    obj = json.loads(_report([0] * 3).to_json())
    obj["avg"] = 1.23
    with pytest.raises(EvaluationError):
        validate_report(obj)
    del obj["stages"]
    with pytest.raises(EvaluationError):
        validate_report(obj)


def test_emit_to_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError):
        emit_report(_report([0]), blocker / "sub")


def test_curves_csv():
    text = curves_csv({"a": _report([0] * 2), "b": _report([0] * 3)})
    assert text.splitlines()[0] == "method,stage,seen_classes,accuracy"
    assert len(text.splitlines()) == 1 + 5
