"""One pass/fail line per acceptance criterion at the end of the run."""

import pytest

_RESULTS: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and rep.passed:
        return
    num, title = mark.args
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
    _RESULTS[num] = (title, status, detail)
    print(f"\n[acceptance] criterion {num} {status}: {title} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_RESULTS):
        title, status, detail = _RESULTS[num]
        terminalreporter.write_line(f"criterion {num:>2} {status}: {title}" + (f" ({detail})" if detail else ""))
