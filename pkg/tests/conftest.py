import numpy as np
import pytest

# criterion id -> (status, detail), status one of PASS / FAIL / SKIP;; filled by test_acceptance.py
ACCEPTANCE: dict[str, tuple[str, str]] = {}
EXTRA_REPORT: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE and not EXTRA_REPORT:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split()[0])):
        status, detail = ACCEPTANCE[key]
        tr.write_line(f"{status}  {key}: {detail}")
    for line in EXTRA_REPORT:
        tr.write_line(line)
