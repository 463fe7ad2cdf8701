import pytest

# criterion number -> (passed, description); filled by tests/test_acceptance.py
ACCEPTANCE = {}


@pytest.fixture
def criterion():
    def record(number, description, passed, detail=""):
        ACCEPTANCE[number] = (bool(passed), f"{description} {detail}".strip())
        assert passed, f"criterion {number} failed: {description} {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in range(1, max(max(ACCEPTANCE), 9) + 1):
        passed, text = ACCEPTANCE.get(number, (False, "did not complete"))
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {text}")
