import pytest

# acceptance results, one line per criterion, printed after the run
_CRITERIA = {}


@pytest.fixture
def criterion():
    """``criterion(k, ok, detail)`` records the PASS/FAIL line and prints it."""

    def record(k, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {k}: {detail}"
        _CRITERIA[k] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[k])
