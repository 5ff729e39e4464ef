import numpy as np
import pytest

from optomech_otto.model import CouplingKind, EngineParams
from optomech_otto import thermo


def random_density(dim, rng, rank=None):
    rank = dim if rank is None else rank
    X = rng.normal(size=(dim, rank)) + 1j * rng.normal(size=(dim, rank))
    rho = X @ X.conj().T
    return rho / np.trace(rho)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def baseline():
    return EngineParams()


@pytest.fixture(scope="session")
def small_params():
    """Cheap configuration for unit tests."""
    return EngineParams(dim_a=3, dim_b=6, nbar_h=0.3, g=-0.3)


@pytest.fixture(scope="session")
def solved_low():
    """Baseline limit cycle at nbar_h = 0.125."""
    return thermo.solve_engine(EngineParams(nbar_h=0.125))


@pytest.fixture(scope="session")
def solved_high():
    return thermo.solve_engine(EngineParams(nbar_h=0.45))


@pytest.fixture(scope="session")
def solved_high_linear():
    return thermo.solve_engine(EngineParams(nbar_h=0.45, coupling=CouplingKind.LINEAR))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: (len(s.split()[1]), s)):
            terminalreporter.write_line(line)
