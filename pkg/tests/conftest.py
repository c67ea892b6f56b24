import math

import numpy as np
import pytest

from pvstorage.hjb import SolverGrid, solve
from pvstorage.model import (
    PV_OU,
    REFERENCE_BATTERY,
    ModelConfig,
    PvSeasonalSpec,
    SeasonalSpec,
    reference_config,
)

# The reference tables carry no price level or incentive; these are the
# values assumed throughout the suite.
PRICE_INTERCEPT = math.log(160.0)
INCENTIVE = 110.0


@pytest.fixture(scope="session")
def ref_config():
    return reference_config(price_intercept=PRICE_INTERCEPT, incentive=INCENTIVE)


@pytest.fixture(scope="session")
def ref_solution(ref_config):
    grid = SolverGrid.for_config(ref_config)
    field, policy = solve(ref_config, grid)
    return ref_config, grid, field, policy


# Time step at which the HJB value and the left-endpoint Monte Carlo cost are
# compared; both carry O(tau) errors of opposite sign at the 0.024 h grid.
FINE_TAU = 0.006


@pytest.fixture(scope="session")
def fine_solution(ref_config):
    grid = SolverGrid.for_config(ref_config, tau=FINE_TAU)
    field, policy = solve(ref_config, grid)
    return ref_config, grid, field, policy


def drain_config(price=100.0, n_batteries=1, pv_ou=PV_OU):
    """No PV, no demand, no incentive, constant price: stored energy can only be sold."""
    return ModelConfig(
        price_seasonal=SeasonalSpec(math.log(price), ()),
        demand_seasonal=SeasonalSpec(0.0, ()),
        pv_seasonal=PvSeasonalSpec(0.0),
        battery=REFERENCE_BATTERY.parallel(n_batteries),
        pv_ou=pv_ou,
        fixed_log_demand=-math.inf,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_line():
    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
