import math

import pytest
from hypothesis import settings

from stochpath.engine import collect_ensemble
from stochpath.model import BlochState, ModelParams

settings.register_profile("default", deadline=None)
settings.load_profile("default")

QND_PARAMS = ModelParams(dt=0.006, n_steps=100)
QND_ZF = math.cos(math.pi / 4)


@pytest.fixture(scope="session")
def qnd_record():
    """1e5 plain-measurement trajectories from z = 0 on the default 20-point grid."""
    return collect_ensemble(100000, BlochState(1, 0, 0), QND_PARAMS, master_seed=0)


ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
