import pytest

# criterion number -> (passed, detail); filled by test_acceptance.py
CRITERIA: dict = {}


@pytest.fixture(scope="session")
def criteria():
    return CRITERIA


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
