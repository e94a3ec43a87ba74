"""Shared pytest wiring: the acceptance suite reports one line per criterion."""

import pytest

RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = RESULTS.setdefault(number, {"title": title, "passed": True, "seconds": 0.0, "detail": ""})
    if report.when == "call":
        entry["seconds"] += report.duration
        entry["detail"] = dict(item.user_properties).get("detail", "")
    if report.failed:
        entry["passed"] = False
        if report.when == "call" and not entry["detail"]:
            entry["detail"] = str(report.longrepr.reprcrash.message).splitlines()[0] if hasattr(
                report.longrepr, "reprcrash") else "failed"


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        r = RESULTS[number]
        status = "PASS" if r["passed"] else "FAIL"
        line = f"criterion {number}: {status}  {r['title']}  ({r['seconds']:.1f} s)"
        if r["detail"]:
            line += f"  {r['detail']}"
        terminalreporter.write_line(line)
