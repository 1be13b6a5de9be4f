import pytest

VERDICTS: list[tuple[int, bool, str]] = []


@pytest.fixture
def verdict():
    """Record one acceptance outcome, then assert it."""
    def record(criterion: int, ok: bool, detail: str):
        VERDICTS.append((criterion, bool(ok), detail))
        assert ok, f"criterion {criterion}: {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, ok, detail in sorted(VERDICTS, key=lambda v: v[0]):
        terminalreporter.write_line(f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}")
