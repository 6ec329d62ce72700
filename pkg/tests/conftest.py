"""Prints one PASS/FAIL line per acceptance criterion at the end of the run."""

import pytest

_RESULTS: dict[str, str] = {}
_NOTES: dict[str, list[str]] = {}


@pytest.fixture
def note(request):
    """``note("...")`` attaches a measured value to the test's criterion line."""
    marker = request.node.get_closest_marker("criterion")
    name = marker.args[0] if marker else request.node.name
    return lambda text: _NOTES.setdefault(name, []).append(text)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    name = marker.args[0]
    failed = rep.failed or (rep.when == "call" and rep.outcome != "passed")
    if failed:
        _RESULTS[name] = "FAIL"
    elif rep.when == "call":
        _RESULTS.setdefault(name, "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, status in _RESULTS.items():
        detail = "; ".join(_NOTES.get(name, []))
        terminalreporter.write_line(f"{status}  {name}" + (f"  [{detail}]" if detail else ""))
