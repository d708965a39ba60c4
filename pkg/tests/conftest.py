"""Shared test wiring.

The acceptance tests register one verdict per numbered criterion through
``record_criterion``; a terminal-summary hook prints them as a block at
the end of the run so the pass/fail state of every criterion is visible
in one place regardless of how pytest interleaved the tests.
"""

import matplotlib

matplotlib.use("Agg")

_CRITERIA = {}


def record_criterion(number: int, passed: bool, detail: str = "") -> None:
    _CRITERIA[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        passed, detail = _CRITERIA[number]
        verdict = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d}: {verdict}  {detail}")
