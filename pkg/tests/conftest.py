"""Collects acceptance-criterion outcomes and prints one PASS/FAIL line per criterion."""

import pytest

_outcomes: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _outcomes.setdefault(number, {"title": title, "status": "PASS", "notes": []})
    if report.when == "call":
        entry["notes"].extend(f"{key}={value}" for key, value in report.user_properties)
    if report.failed:
        entry["status"] = "FAIL"
        entry["notes"].append(item.name)
    elif report.skipped and entry["status"] == "PASS":
        entry["status"] = "SKIP"
        reason = report.longrepr[2] if isinstance(report.longrepr, tuple) else str(report.longrepr)
        entry["notes"].append(reason.removeprefix("Skipped: "))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_outcomes):
        entry = _outcomes[number]
        note = f" ({'; '.join(entry['notes'])})" if entry["notes"] else ""
        terminalreporter.write_line(f"criterion {number:>2} {entry['status']}: {entry['title']}{note}")
