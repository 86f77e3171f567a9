"""Collects one pass/fail line per acceptance criterion for the terminal summary."""

_results: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")
    config.addinivalue_line("markers", "slow: trains full desk-scale models (tens of minutes)")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if call.when == "setup" and call.excinfo is not None:
        _results[number] = (title, "ERROR", str(call.excinfo.value).splitlines()[0][:120])
    elif call.when == "call":
        detail = dict(item.user_properties).get("detail", "")
        _results[number] = (title, "FAIL" if call.excinfo is not None else "PASS", detail)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        title, status, detail = _results[number]
        line = f"criterion {number:2d} {status:5s} {title}"
        terminalreporter.write_line(line + (f" | {detail}" if detail else ""))
