import numpy as np
import pytest

from lowrank_quant.tensor import Rng


@pytest.fixture
def rng():
    return Rng(1234)


def gaussian(seed, rows, cols):
    return Rng(seed).standard_normal(rows, cols)


def np_rng(seed):
    return np.random.default_rng(seed)


def pytest_terminal_summary(terminalreporter):
    from lowrank_quant import acceptance

    if not acceptance._CACHE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(acceptance._CACHE):
        terminalreporter.write_line(acceptance._CACHE[n].line())
