import numpy as np
import pytest

# filled by tests/test_acceptance.py: (number, title, passed, detail)
ACCEPTANCE = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {num} {'PASS' if ok else 'FAIL'}: {title} | {detail}")
