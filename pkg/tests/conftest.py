"""Shared test plumbing: collects acceptance-criterion outcomes and prints
one PASS/FAIL line per criterion at the end of the run."""

import pytest

_ACCEPTANCE = {}


def record_criterion(number: int, passed: bool, detail: str = "") -> None:
    _ACCEPTANCE[number] = (bool(passed), detail)


@pytest.hookimpl(trylast=True)
def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        passed, detail = _ACCEPTANCE[number]
        status = "PASS" if passed else "FAIL"
        suffix = f" ({detail})" if detail else ""
        terminalreporter.write_line(f"criterion {number:>2}: {status}{suffix}")
