# tests/conftest.py - Shared fixtures: bundled cases and small inline grids
import logging
from pathlib import Path

import pytest

from services.grid_service import GridService

CASES = Path(__file__).resolve().parent.parent / "cases"

# one slack, one load bus, no line charging and no shunts
TWO_BUS = """
function mpc = two_bus
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
    1   3   0   0   0   0   1   1   0   0   1   1.1 0.9;
    2   1   50  20  0   0   1   1   0   0   1   1.1 0.9;
];
mpc.gen = [
    1   50  20  100 -100    1   100 1   200 0;
];
mpc.branch = [
    1   2   0.01    0.1 0   0   0   0   0   0   1;
];
mpc.gencost = [
    2   0   0   3   0.01    20  0;
];
"""

# a generator on the load bus carries the whole load over a weak line
WEAK_TIE = """
function mpc = weak_tie
mpc.baseMVA = 100;
mpc.bus = [
    1   3   0   0   0   0   1   1   0   0   1   1.1 0.9;
    2   2   200 50  0   0   1   1   0   0   1   1.1 0.9;
];
mpc.gen = [
    1   0   0   100 -100    1   100 1   100 0;
    2   200 50  100 -100    1   100 1   300 0;
];
mpc.branch = [
    1   2   0.01    0.5 0   0   0   0   0   0   1;
];
mpc.gencost = [
    2   0   0   3   0.02    40  0;
    2   0   0   3   0.01    20  0;
];
"""


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance experiments")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def restore_logging():
    """run() reconfigures the root logger; put it back afterwards"""
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield
    for h in list(root.handlers):
        root.removeHandler(h)
    for h in handlers:
        root.addHandler(h)
    root.setLevel(level)


@pytest.fixture(scope="session")
def two_bus():
    return GridService.prepare(GridService.parse_case(TWO_BUS))


@pytest.fixture(scope="session")
def weak_tie():
    return GridService.prepare(GridService.parse_case(WEAK_TIE))


@pytest.fixture(scope="session")
def case3_uc():
    return GridService.prepare(GridService.load_case(CASES / "case3_uc.m"))


@pytest.fixture(scope="session")
def case3_two_units():
    return GridService.prepare(GridService.load_case(CASES / "case3_two_units.m"))


@pytest.fixture(scope="session")
def case14():
    return GridService.prepare(GridService.load_case(CASES / "case14.m"))


@pytest.fixture(scope="session")
def case30():
    return GridService.prepare(GridService.load_case(CASES / "case30.m"))
