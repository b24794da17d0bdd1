import math

import numpy as np
import pytest
from hypothesis import settings

from optofeedback.model import OpmDevice, hz, reference_device, reference_noise

settings.register_profile("ci", max_examples=40, deadline=None)
settings.load_profile("ci")

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def device():
    return reference_device()


@pytest.fixture(scope="session")
def noise():
    return reference_noise(205.0)


@pytest.fixture(scope="session")
def bad_cavity_device():
    wm = hz(8.14e6)
    return OpmDevice(wm, hz(76.0), 100 * wm, hz(5.35e9), hz(130.0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
