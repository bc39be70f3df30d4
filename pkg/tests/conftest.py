from __future__ import annotations

import pytest

ACCEPTANCE_LINES = {}


@pytest.fixture(scope="session")
def acceptance_report():
    """Record the PASS/FAIL line of an acceptance criterion."""

    def record(number, passed, detail):
        ACCEPTANCE_LINES[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(ACCEPTANCE_LINES[number])

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
