"""Acceptance bookkeeping: one PASS/FAIL line per criterion at the end of the run."""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_RESULTS = {}


def pytest_runtest_logreport(report):
    number = dict(report.user_properties).get("criterion")
    if number is None:
        return
    props = dict(report.user_properties)
    entry = _RESULTS.setdefault(number, {"title": props.get("title", ""), "passed": True, "detail": ""})
    if report.failed or (report.when == "call" and report.skipped):
        entry["passed"] = False
    if report.when == "call":
        entry["detail"] = props.get("detail", "")


def pytest_collection_modifyitems(items):
    for item in items:
        marker = item.get_closest_marker("criterion")
        if marker is not None:
            number, title = marker.args
            item.user_properties.append(("criterion", number))
            item.user_properties.append(("title", title))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        entry = _RESULTS[number]
        status = "PASS" if entry["passed"] else "FAIL"
        detail = f" [{entry['detail']}]" if entry["detail"] else ""
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {entry['title']}{detail}")
