"""Collects one pass/fail line per acceptance criterion for the terminal summary."""

import pytest

_LINES = {}


class _Recorder:
    def __init__(self, number, title):
        self.number, self.title = number, title
        self.done = False

    def __call__(self, ok, detail=""):
        self.done = True
        _LINES[self.number] = f"criterion {self.number} [{'PASS' if ok else 'FAIL'}] {self.title}: {detail}"
        print(_LINES[self.number])
        return ok


@pytest.fixture
def criterion(request):
    mark = request.node.get_closest_marker("criterion")
    rec = _Recorder(*mark.args)
    yield rec
    if not rec.done:
        _LINES[rec.number] = f"criterion {rec.number} [FAIL] {rec.title}: raised before a verdict"


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_LINES):
            terminalreporter.write_line(_LINES[n])
