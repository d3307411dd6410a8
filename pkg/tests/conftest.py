"""Per-criterion pass/fail summary for tests marked ``@pytest.mark.criterion(n, title)``."""
from collections import defaultdict

import pytest

_OUTCOMES = defaultdict(list)
_TITLES = {}
_NOTES = defaultdict(list)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.fixture
def note(request):
    """Attach a one-line measurement to the summary of the test's criterion."""
    marker = request.node.get_closest_marker("criterion")

    def add(text):
        if marker is not None:
            _NOTES[marker.args[0]].append(text)

    return add


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    number, title = marker.args
    _TITLES[number] = title
    _OUTCOMES[number].append((item.name, call.excinfo is None))


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_OUTCOMES):
        results = _OUTCOMES[number]
        passed = sum(ok for _, ok in results)
        status = "PASS" if passed == len(results) else "FAIL"
        count = f" ({passed}/{len(results)} cases)" if len(results) > 1 else ""
        terminalreporter.write_line(f"{status}  criterion {number}: {_TITLES[number]}{count}")
        for name, ok in results:
            if not ok and len(results) > 1:
                terminalreporter.write_line(f"        failed: {name}")
        for text in _NOTES[number]:
            terminalreporter.write_line(f"        {text}")
