"""Collects acceptance-criterion outcomes and prints one verdict line per criterion."""

import pytest

_RESULTS: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    entry = _RESULTS.setdefault(number, {"title": title, "passed": True, "ran": False, "notes": []})
    if report.when == "call":
        entry["ran"] = True
        entry["notes"] += [str(v) for k, v in item.user_properties if k == "detail"]
    if report.failed:
        entry["passed"] = False


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        r = _RESULTS[number]
        verdict = "PASS" if r["passed"] and r["ran"] else ("SKIP" if not r["ran"] and r["passed"] else "FAIL")
        detail = "; ".join(r["notes"])
        terminalreporter.write_line(f"criterion {number:>2} {verdict}  {r['title']}"
                                    + (f"  [{detail}]" if detail else ""))
