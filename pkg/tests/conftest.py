import warnings

import numpy as np
import pytest

from pdkl.microstructure import make_spec


def bar_spec(n_cells=50, E_s=200e9, E_c=5e9, rho=8000.0, length=1.0):
    return make_spec(1, "Bar1D_QuarterHalfQuarter", length, n_cells, E_s, E_c, rho)


def plate_spec(n_cells=30, layout="Plate2D_CenterSquareInclusion", E_s=200e9, E_c=5e9, rho=8000.0, length=1.0):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return make_spec(2, layout, length, n_cells, E_s, E_c, rho)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """``criterion(n, passed, detail)`` records one acceptance line for the terminal summary."""
    store = request.config.stash.setdefault(_ACCEPTANCE, {})

    def record(number: int, passed: bool, detail: str) -> bool:
        store[number] = (bool(passed), detail)
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_ACCEPTANCE, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(store):
        passed, detail = store[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
