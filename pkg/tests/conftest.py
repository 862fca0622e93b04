"""Collects the outcome of every acceptance criterion and prints one line each."""

import pytest

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        n, title = mark.args
        detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
        _criteria[n] = (title, "PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        title, verdict, detail = _criteria[n]
        terminalreporter.write_line(f"criterion {n:2d} {verdict}  {title}" + (f"  [{detail}]" if detail else ""))
