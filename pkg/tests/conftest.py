"""Acceptance reporting: one pass/fail line per criterion, plus the
whole-suite runtime gate."""

from __future__ import annotations

import time

import pytest

SUITE_BUDGET_S = 60.0

_started = time.perf_counter()
_criteria: dict[str, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call":
        return
    detail = dict(report.user_properties).get("detail", "")
    _criteria[marker.args[0]] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    elapsed = time.perf_counter() - _started
    tr = terminalreporter
    tr.section("acceptance criteria")
    for name, (status, detail) in _criteria.items():
        tr.write_line(f"{status}  {name}" + (f"  [{detail}]" if detail else ""))
    status = "PASS" if elapsed < SUITE_BUDGET_S else "FAIL"
    tr.write_line(f"{status}  whole suite under {SUITE_BUDGET_S:.0f} s  [{elapsed:.1f} s]")


def pytest_sessionfinish(session, exitstatus):
    if _criteria and time.perf_counter() - _started >= SUITE_BUDGET_S and exitstatus == 0:
        session.exitstatus = 1
