import numpy as np
import pytest

from nvreadout import photophysics as pp
from nvreadout import synth

# low-intensity NV1 rates, MHz
NV1_RATES = dict(gamma=67.4, S0=9.9, S1=91.6, D0=4.83, D1=2.11)


@pytest.fixture(scope="session")
def nv1_base():
    return pp.PRESETS["NV1"]


@pytest.fixture(scope="session")
def nv1():
    """NV1 preset at the 2 I_sat readout intensity."""
    return pp.preset("NV1", 2.0)


@pytest.fixture(scope="session")
def nv1_cal(nv1):
    return synth.simulated_calibration(nv1)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
