"""Collects acceptance outcomes and prints one pass/fail line per criterion."""

import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(id, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    cid, title = marker.args
    entry = _RESULTS.setdefault(item.nodeid, {"id": cid, "title": title, "status": "PASS",
                                              "detail": ""})
    if report.failed:
        entry["status"] = "FAIL"
    elif report.skipped and entry["status"] == "PASS" and report.when == "setup":
        entry["status"] = "SKIP"
    details = [v for k, v in item.user_properties if k == "measured"]
    if details:
        entry["detail"] = "; ".join(details)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for entry in sorted(_RESULTS.values(), key=lambda e: e["id"]):
        line = f"{entry['status']:4}  {entry['id']:<4} {entry['title']}"
        if entry["detail"]:
            line += f"  [{entry['detail']}]"
        tr.write_line(line)
