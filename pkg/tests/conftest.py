import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from bandprobe import tensor as T  # noqa: E402


@pytest.fixture
def f64():
    with T.default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_acceptance = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or report.failed:
        name = report.nodeid.split("::")[-1]
        if report.passed:
            _acceptance.setdefault(name, "PASS")
        else:
            _acceptance[name] = "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_acceptance, key=lambda n: int(n.split("_")[2])):
        num, label = name.split("_")[2], " ".join(name.split("_")[3:])
        terminalreporter.write_line(f"criterion {num} ({label}): {_acceptance[name]}")
