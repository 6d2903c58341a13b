import numpy as np
import pytest

from mvot.sources import PopulationSpec, sample_population
from mvot.vault import ProtocolParams

# Acceptance results collected by test_acceptance.py and printed at the end of the run.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_params():
    return ProtocolParams(gamma=10, n=5, m=50, k=5, tr=3, dim=64)


@pytest.fixture(scope="session")
def small_population():
    return sample_population(PopulationSpec(num_identities=20, dim=64, n_channels=5, rng_seed=7))


@pytest.fixture(scope="session")
def default_population():
    return sample_population(PopulationSpec(num_identities=50, rng_seed=3))
