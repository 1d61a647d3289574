import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from iotab.synthetic import random_balanced_table, synthetic_economy  # noqa: E402
from iotab.table_model import IODimensions  # noqa: E402

SMALL = IODimensions(K=3, L=3, M=4)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def balanced12(rng):
    return random_balanced_table(rng)


@pytest.fixture(scope="session")
def small_economy():
    """(dataset, target_table) with 12 regions on a 3-industry table."""
    return synthetic_economy(seed=3, n_regions=12, n_cities=2, dims=SMALL)


@pytest.fixture(scope="session")
def repo_root():
    return Path(__file__).resolve().parents[1]


# acceptance lines, echoed in the terminal summary so they survive output capture
CRITERIA = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
