import pytest

_REPORT: dict = {}


@pytest.fixture
def report():
    """Record one summary line per acceptance criterion: ``report(number, passed, detail)``."""

    def record(number, passed, detail, informational=False):
        if passed is None:
            status = "NOT RUN"
        else:
            status = "PASS" if passed else "FAIL"
        if informational:
            status += " (informational)"
        _REPORT[str(number)] = f"criterion {str(number):<8} {status:<22} {detail}"
        print(_REPORT[str(number)])

    return record


def pytest_terminal_summary(terminalreporter):
    if not _REPORT:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_REPORT, key=lambda k: (int(k.split("-")[0]), k)):
        terminalreporter.write_line(_REPORT[key])
