import os

import pytest

from upm.address_space import MemorySystem
from upm.engine import UPMEngine

PS = 4096

_acceptance: dict[int, tuple[str, str]] = {}


@pytest.fixture
def mem():
    return MemorySystem(PS)


@pytest.fixture
def engine(mem):
    return UPMEngine(mem)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): numbered exit criterion")


def pytest_runtest_logreport(report):
    marker = getattr(report, "acceptance", None)
    if marker is None:
        return
    number, title = marker
    if report.when == "call" or report.outcome != "passed":
        # a parametrized criterion passes only if every case does
        previous = _acceptance.get(number, (title, "passed"))[1]
        outcome = report.outcome if previous == "passed" else previous
        _acceptance[number] = (title, outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    m = item.get_closest_marker("acceptance")
    if m is not None:
        report.acceptance = m.args


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_acceptance):
        title, outcome = _acceptance[number]
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"[{verdict}] criterion {number:>2}: {title}")


if os.environ.get("CI"):
    from hypothesis import settings

    settings.register_profile("ci", max_examples=200, deadline=None)
    settings.load_profile("ci")
