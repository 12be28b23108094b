import pytest

ACCEPTANCE = {}


@pytest.fixture
def record_criterion():
    """Store a criterion outcome for the summary block printed at the end of the run."""
    def record(number, name, passed, detail):
        ACCEPTANCE[number] = (name, bool(passed), detail)
        print(f"criterion {number} [{'PASS' if passed else 'FAIL'}] {name}: {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        name, passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number} [{'PASS' if passed else 'FAIL'}] {name}: {detail}")
