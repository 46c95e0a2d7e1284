import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pointscatter.forward_solver import SolverConfig, picard_solve
from pointscatter.potential import RadialBump

settings.register_profile("ci", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")

A_NORTH = np.array([0.0, 0.0, 1.0])

# one line per acceptance criterion, printed in the terminal summary
RESULTS = []

# coarse but complete discretisation for unit tests; acceptance uses defaults
COARSE = SolverConfig(h=1 / 16, ds=1 / 32, n_zeta=6, n_psi=8, n_zeta_source=16, n_psi_source=8)


@pytest.fixture(scope="session")
def coarse_cfg():
    return COARSE


@pytest.fixture(scope="session")
def bump_field():
    """Default-resolution field of radial_bump(0.5, 2) from the north pole."""
    return picard_solve(RadialBump(0.5, 2), A_NORTH, SolverConfig())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
