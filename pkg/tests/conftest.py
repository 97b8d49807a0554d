import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from regencrm.simulation import mirrored_scenario, rollout, table_i_scenario

settings.register_profile(
    "default", deadline=None, max_examples=200, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def table_i():
    return table_i_scenario(dt=1e-4)


@pytest.fixture(scope="session")
def baseline_run(table_i):
    """Full maneuver with the fixed Table I gains at the default step."""
    return rollout(table_i, record=True)


@pytest.fixture(scope="session")
def mirrored():
    return mirrored_scenario()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


FILTER_KICK = 1e-4  # initial impedance-filter offset [rad]; small enough to stay off saturation


def kick_filter(state):
    """Start the impedance filter away from rest so that S(0) = Lambda * w(0) != 0."""
    state.controller[: state.q.size] = FILTER_KICK


@pytest.fixture(scope="session")
def perturbed_run(table_i):
    return rollout(table_i, record=True, perturb=kick_filter)
