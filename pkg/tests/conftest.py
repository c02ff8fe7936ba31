import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cilforge.backbone import build_backbone
from cilforge.datastream import DataManager, synth_blobs
from helpers import TINY

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def tiny_backbone():
    return build_backbone(TINY)


@pytest.fixture
def tiny_stream():
    """6 classes in 3 tasks of 2, 5 train / 3 test samples per class."""
    return DataManager(synth_blobs(6, 5, 8, spread=0.3, seed=11, test_per_class=3), 2, 2, seed=1993)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


_CRITERIA = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if not name.startswith("test_criterion_"):
        return
    if report.when == "call" or report.outcome != "passed":
        _CRITERIA[name] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA, key=lambda n: int(n.split("_")[2])):
        num, label = name.split("_")[2], " ".join(name.split("_")[3:])
        terminalreporter.write_line(f"criterion {num} ({label}): {_CRITERIA[name]}")
