"""Shared test plumbing.

Tests marked ``@pytest.mark.criterion(n, "title")`` roll up into a
per-criterion PASS/FAIL line printed after the run, so the acceptance
status is readable at a glance.
"""

import pytest

_CRITERIA: dict[int, str] = {}
_RESULTS: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line(
        "markers",
        "criterion(num, title): marks a test as covering one acceptance criterion",
    )


def pytest_collection_modifyitems(items):
    for item in items:
        marker = item.get_closest_marker("criterion")
        if marker is not None:
            item.user_properties.append(("criterion", marker.args))


def pytest_runtest_logreport(report):
    for name, value in report.user_properties:
        if name != "criterion":
            continue
        num, title = value
        _CRITERIA[num] = title
        outcomes = _RESULTS.setdefault(num, [])
        if report.when == "call":
            outcomes.append(report.outcome == "passed")
        elif report.outcome != "passed":  # setup/teardown error
            outcomes.append(False)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        outcomes = _RESULTS.get(num, [])
        status = "PASS" if outcomes and all(outcomes) else "FAIL"
        terminalreporter.write_line(
            f"criterion {num:>2}: {status}  {_CRITERIA[num]}")
