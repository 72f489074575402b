import pytest

_VERDICTS = {}


@pytest.fixture
def verdict():
    """Record one pass/fail line per acceptance criterion and assert on it."""

    def record(number, name, passed, detail=""):
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {name}: {detail}"
        _VERDICTS[number] = line
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        terminalreporter.write_line(_VERDICTS[number])
