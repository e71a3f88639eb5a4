import numpy as np
import pytest

from ecn.tensor import precision


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with precision("float64"):
        yield


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """Record one verdict line per acceptance criterion; printed in the terminal summary."""
    def record(criterion, status, detail):
        line = f"criterion {criterion}: {status} - {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return status == "PASS"
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: (int(l.split()[1].rstrip(":abc")), l)):
            terminalreporter.write_line(line)
