import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import pytest

_ACCEPTANCE = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
        _ACCEPTANCE[marker.args[0]] = ("PASS" if report.passed else "FAIL", marker.args[1], detail)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        status, title, detail = _ACCEPTANCE[n]
        line = f"{status} criterion {n}: {title}"
        terminalreporter.write_line(line + (f" [{detail}]" if detail else ""))
