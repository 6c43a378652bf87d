import pytest

ACCEPTANCE_LINES: dict[str, str] = {}


@pytest.fixture
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES, key=lambda k: int(k.split()[0])):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
