"""Acceptance bookkeeping: tests marked ``criterion(n, title)`` get one summary line each."""

import pytest

_OUTCOMES = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call":
        return
    number, title = marker.args
    details = [v for k, v in item.user_properties if k == "detail"]
    _OUTCOMES[number] = (title, report.passed, report.duration, details)


@pytest.fixture
def detail(record_property):
    """Attach a measured value to the criterion's summary line."""

    def add(text):
        record_property("detail", text)

    return add


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_OUTCOMES):
        title, passed, seconds, details = _OUTCOMES[number]
        verdict = "PASS" if passed else "FAIL"
        extra = f" [{'; '.join(details)}]" if details else ""
        terminalreporter.write_line(f"criterion {number}: {verdict} {title} ({seconds:.1f}s){extra}")

