import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line for an acceptance criterion and assert it."""

    def record(number: int, ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
