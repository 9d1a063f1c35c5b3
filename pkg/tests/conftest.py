import pytest

_VERDICTS: list[str] = []


@pytest.fixture
def acceptance_log():
    """Callable that records one verdict line for the terminal summary."""
    return _VERDICTS.append


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
