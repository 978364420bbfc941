import numpy as np
import pytest

from petkit import tensor as T

ACCEPTANCE: dict[int, str] = {}


@pytest.fixture(autouse=True)
def verify_mode():
    """Tests run in float64 unless they opt into training precision."""
    with T.precision("verify-64bit"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def verdict():
    """Record and print one PASS/FAIL line for an acceptance criterion."""
    def record(n: int, ok: bool, detail: str, soft: bool = False) -> bool:
        status = "PASS" if ok else ("WARN" if soft else "FAIL")
        line = f"criterion {n:>2}: {status}  {detail}"
        ACCEPTANCE[n] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
