import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.outcome != "passed"):
        return
    number, title = marker.args
    details = "  ".join(f"{k}={v}" for k, v in item.user_properties)
    status = {"passed": "PASS", "failed": "FAIL", "skipped": "INFO"}[rep.outcome]
    if rep.outcome == "skipped" and isinstance(rep.longrepr, tuple):
        details = (details + "  " if details else "") + rep.longrepr[2].removeprefix("Skipped: ")
    # keep the worst outcome across phases
    prev = _CRITERIA.get(number)
    if prev is None or prev[1] == "PASS":
        _CRITERIA[number] = (title, status, details)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status, details = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number} {status:4s} {title}  {details}".rstrip())
