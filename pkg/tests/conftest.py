import numpy as np
import pytest

from sacnet.tensor import set_debug, set_precision

# Lines recorded by test_acceptance.py; printed once at the end of the session.
ACCEPTANCE_LINES = []


@pytest.fixture(autouse=True)
def _float64():
    set_precision("float64")
    set_debug(False)
    yield
    set_precision("float64")
    set_debug(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
