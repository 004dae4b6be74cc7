import pytest

_CRITERIA: list[str] = []


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` logs one acceptance line, then asserts ``ok``."""

    def check(n: int, ok: bool, detail: str) -> None:
        _CRITERIA.append(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail

    return check


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(_CRITERIA, key=lambda s: int(s.split(":")[0].split()[1])):
        terminalreporter.write_line(line)
