import pytest

_ACCEPTANCE = []


def _record(name: str, ok: bool, detail: str) -> bool:
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    _ACCEPTANCE.append(line)
    print(line)
    return ok


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line; the lines are repeated in the terminal summary."""
    return _record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
