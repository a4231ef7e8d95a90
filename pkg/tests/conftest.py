import io

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from paleosmc.models import get_model
from paleosmc.orbital import load_orbital_table, synthetic_orbital_table
from paleosmc.simulate import PRESETS

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def orbital():
    return load_orbital_table(io.StringIO(synthetic_orbital_table()))


@pytest.fixture(scope="session")
def sm91_forced(orbital):
    return get_model("sm91", True, orbital)


@pytest.fixture(scope="session")
def sm91_truth(sm91_forced):
    return sm91_forced.theta_from_dict(PRESETS["sm91-f"]["theta"])


@pytest.fixture
def rng():
    return np.random.default_rng(20240229)


def pytest_configure(config):
    config._acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
