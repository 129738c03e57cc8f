"""Acceptance bookkeeping: one PASS/FAIL line per criterion at the end of the run."""
import pytest

_outcomes = {}


def pytest_runtest_logreport(report):
    criterion = getattr(report, "criterion", None)
    if criterion is None:
        return
    number, title = criterion
    if report.when == "call" or report.outcome != "passed":
        previous = _outcomes.get(number, (title, "PASS"))[1]
        status = "PASS" if report.outcome == "passed" and previous == "PASS" else "FAIL"
        _outcomes[number] = (title, status)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("acceptance")
    if marker is not None:
        outcome.get_result().criterion = (marker.args[0], marker.kwargs.get("title", item.name))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_outcomes):
        title, status = _outcomes[number]
        terminalreporter.write_line(f"criterion {number:2d} {status}: {title}")
