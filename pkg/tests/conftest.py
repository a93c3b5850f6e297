import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report():
    def add(criterion: int, name: str, passed: bool, detail: str) -> None:
        line = f"{'PASS' if passed else 'FAIL'} [{criterion}] {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return add


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
