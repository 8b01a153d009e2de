import numpy as np
import pytest

from dyadrep.kernels import QuadratureSpec, TruncationSpec, builtin_kernel

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def beurling():
    return builtin_kernel("beurling-re")


@pytest.fixture(scope="session")
def smooth8():
    return TruncationSpec("smooth", 0.125)


@pytest.fixture(scope="session")
def quad():
    return QuadratureSpec()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
