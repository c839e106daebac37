import re

import numpy as np
import pytest

from spotcheck.featurize import gen_synth


@pytest.fixture
def rng():
    return np.random.default_rng(20240613)


@pytest.fixture(scope="session")
def blob():
    """Small separated synthetic set shared by the detector tests."""
    return gen_synth(8, 120, 30, 1.0, seed=11)


# acceptance criteria append (number, title, ok, detail) here; printed after the run
ACCEPTANCE_LINES: list = []


def _order(line):
    num = str(line[0])
    return int(re.match(r"\d+", num).group()), num


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, ok, detail in sorted(ACCEPTANCE_LINES, key=_order):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  [{num}] {title}: {detail}")
