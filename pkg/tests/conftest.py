"""Collects acceptance verdicts and prints one line per criterion at the end of the run."""

import pytest

VERDICTS = []


@pytest.fixture
def verdict():
    def record(number, title, passed, detail):
        VERDICTS.append((number, title, passed, detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(VERDICTS, key=lambda v: v[0]):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} criterion {number} ({title}): {detail}")
