import numpy as np
import pytest
from hypothesis import settings, strategies as st

from seldt.geometry import Doa

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")

azimuths = st.floats(-720.0, 720.0, allow_nan=False)
elevations = st.floats(-90.0, 90.0, allow_nan=False)
inner_elevations = st.floats(-89.0, 89.0, allow_nan=False)


@st.composite
def doas(draw, el=elevations):
    return Doa(draw(azimuths), draw(el))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
