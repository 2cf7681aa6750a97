import pytest

ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    """Record ``(number, passed, detail)`` for the acceptance summary."""

    def record(number, passed, detail):
        ACCEPTANCE[number] = (bool(passed), detail)
        print(f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}")
