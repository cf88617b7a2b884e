import pytest

VERDICTS: dict[int, str] = {}


@pytest.fixture(scope="session")
def verdict():
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""

    def record(number: int, name: str, ok: bool, detail: str):
        VERDICTS[number] = f"{'PASS' if ok else 'FAIL'} criterion {number:2d} {name}: {detail}"
        print(VERDICTS[number])
        assert ok, VERDICTS[number]

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance")
        for k in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[k])
