"""Collects the one-line verdicts of the acceptance suite and prints them at the end of the run."""

import pytest

_VERDICTS = []


@pytest.fixture
def verdict():
    """Call ``verdict(number, ok, detail)`` once per criterion."""

    def record(number, ok, detail):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _VERDICTS.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_VERDICTS):
        terminalreporter.write_line(line)
