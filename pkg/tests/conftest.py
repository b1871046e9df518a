import pytest

_VERDICTS = []


@pytest.fixture(scope="session")
def verdict():
    """Record one acceptance line: ``verdict(number, title, ok, detail)``."""

    def record(number, title, ok, detail=""):
        _VERDICTS.append((number, f"{'PASS' if ok else 'FAIL'}  criterion {number:>2}  {title}: {detail}"))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_VERDICTS, key=lambda item: item[0]):
        terminalreporter.write_line(line)
