import pytest

from brittlesim.core import BaselineGaussian
from brittlesim.simulators import AnnulusSimulator
from brittlesim.training import calibrate_annulus_tau, collect_pairs


@pytest.fixture(scope="session")
def calibrated_annulus():
    return calibrate_annulus_tau(AnnulusSimulator(), 0.75, seed=0)


@pytest.fixture(scope="session")
def annulus_states(calibrated_annulus):
    """States visited by baseline rollouts, the distribution rates are quoted over."""
    sim = calibrated_annulus
    pool = collect_pairs(sim, BaselineGaussian(sim.baseline_scales()), sim.sample_prior, 50, 200, seed=12345)
    return pool.x_prev


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
