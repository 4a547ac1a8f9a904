import pytest

CRITERIA = {}


def record(number, title, passed, detail=""):
    """Store one acceptance verdict and echo it immediately."""
    line = f"CRITERION {number} {'PASS' if passed else 'FAIL'}: {title}" + (f" ({detail})" if detail else "")
    CRITERIA[number] = line
    print(line)
    return passed


@pytest.fixture
def criterion():
    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[number])
