import pytest

# criterion number -> (passed, description, measurement); filled by test_acceptance
ACCEPTANCE_RESULTS = {}


def record_acceptance(number: int, passed: bool, title: str, detail: str):
    ACCEPTANCE_RESULTS[number] = (passed, title, detail)
    print(f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}")


@pytest.fixture
def acceptance():
    return record_acceptance


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        passed, title, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n} [{'PASS' if passed else 'FAIL'}] {title}: {detail}")
