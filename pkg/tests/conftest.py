import pytest

# one line per acceptance criterion, filled in by tests/test_acceptance.py
CRITERIA_LINES: list = []


def record_criterion(label: str, passed: bool, detail: str) -> None:
    line = f"{label} {'PASS' if passed else 'FAIL'}: {detail}"
    CRITERIA_LINES.append(line)
    print(line)


@pytest.fixture
def criterion():
    return record_criterion


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA_LINES, key=lambda s: int(s.split()[0][2:])):
            terminalreporter.write_line(line)
