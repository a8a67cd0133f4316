import re

import pytest

_criteria = {}


@pytest.fixture
def criterion():
    """Record one acceptance line: criterion(number, title, ok, detail)."""

    def record(number, title, ok, detail=""):
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}" + (f"  ({detail})" if detail else "")
        _criteria[number] = line
        print(line)
        assert ok, line

    return record


def pytest_runtest_logreport(report):
    # a criterion test that dies before reaching its verdict still gets a line
    match = re.search(r"test_criterion_(\d+)_(\w+)", report.nodeid)
    if match and report.failed and int(match.group(1)) not in _criteria:
        _criteria[int(match.group(1))] = (
            f"criterion {int(match.group(1)):2d} FAIL  {match.group(2).replace('_', ' ')}  (error before verdict)")


def pytest_terminal_summary(terminalreporter):
    if _criteria:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_criteria):
            terminalreporter.write_line(_criteria[number])
