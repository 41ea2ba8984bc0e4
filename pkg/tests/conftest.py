import pytest

ACCEPTANCE = {}


def record(criterion: int, passed: bool, detail: str, status: str | None = None):
    """Store and print one acceptance line; shown again in the terminal summary."""
    status = status or ("PASS" if passed else "FAIL")
    line = f"acceptance {criterion:>2}: {status:<6} {detail}"
    ACCEPTANCE[criterion] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])


@pytest.fixture
def rng():
    import numpy as np
    return np.random.default_rng(12345)
