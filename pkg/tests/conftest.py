import numpy as np
import pytest
from hypothesis import settings

from genmaxstable.spatial_core import Family, ParameterVector

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

ALL_FAMILIES = [Family.BROWN_RESNICK, Family.SCHLATHER_POWEXP, Family.SCHLATHER_WHITTLE_MATERN, Family.SMITH]


def make_params(family, lam, nu):
    if family is Family.SMITH:
        return ParameterVector.smith(lam**2 / 2)
    return ParameterVector(lam, nu, family)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
