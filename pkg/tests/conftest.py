import pytest

_ACCEPTANCE = {}


@pytest.fixture
def report():
    """Record one acceptance line: ``report("AC1", passed, "detail")``."""
    def record(criterion, passed, detail=""):
        _ACCEPTANCE[criterion] = (bool(passed), detail)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE, key=lambda k: int(k[2:])):
        passed, detail = _ACCEPTANCE[key]
        terminalreporter.write_line(f"{key} {'PASS' if passed else 'FAIL'}  {detail}")
