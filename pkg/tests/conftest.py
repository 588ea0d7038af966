import pytest

_REPORT = []


@pytest.fixture
def report():
    """Record one pass/fail line for the terminal summary."""
    def record(name, ok, detail=""):
        _REPORT.append(f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else ""))
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _REPORT:
        terminalreporter.section("acceptance criteria")
        for line in _REPORT:
            terminalreporter.write_line(line)
