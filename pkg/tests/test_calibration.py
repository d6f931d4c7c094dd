import numpy as np
import pytest

from kinuq.calibration import CalibrationProblem, calibrate_mu, entropy_discrepancy, sweep
from kinuq.collision import RelaxationRate
from kinuq.errors import BracketingError, ConfigurationError, InvalidInputError
from kinuq.grid import VelocityGrid, entropy
from kinuq.solvers import solve_hom_bgk

GRID = VelocityGrid(10.0, 32)
TIMES = np.linspace(0.0, 4.0, 20)


@pytest.fixture(scope="module")
def f0_set(two_bump):
    return two_bump.initial([[0.0, 0.0], [0.5, 0.5], [-0.5, 0.8]], GRID)


def self_reference(f0_set, mu0, eps=1.0):
    states = solve_hom_bgk(f0_set, GRID, RelaxationRate(mu0, eps), TIMES)
    return CalibrationProblem(f0_set, GRID, eps, TIMES, np.moveaxis(entropy(states, GRID), 0, -1))


@pytest.mark.parametrize("mu0", [0.15, 0.6])
def test_recovers_bgk_self_reference(f0_set, mu0):
    res = calibrate_mu(self_reference(f0_set, mu0))
    assert abs(res.mu - mu0) / mu0 <= 1e-3
    assert res.discrepancy < 1e-4
    assert res.inverse == pytest.approx(1 / res.mu)


def test_discrepancy_zero_at_truth_and_positive_elsewhere(f0_set):
    prob = self_reference(f0_set, 0.4)
    assert entropy_discrepancy(0.4, prob) <= 1e-14
    values = sweep(prob, [0.1, 0.2, 0.4, 0.8, 1.6])
    assert np.argmin(values) == 2
    assert np.all(values[[0, 1, 3, 4]] > 0)


def test_discrepancy_small_mu_limit(f0_set):
    # as mu -> 0 the BGK entropy freezes at its initial value
    prob = self_reference(f0_set, 0.4)
    h0 = prob.reference[:, :1]
    expected = np.mean(np.sqrt(np.mean((h0 - prob.reference) ** 2, axis=-1)))
    assert entropy_discrepancy(1e-12, prob) == pytest.approx(expected, rel=1e-9)


def test_discrepancy_continuous_in_mu(f0_set):
    prob = self_reference(f0_set, 0.4)
    a, b = entropy_discrepancy(0.3, prob), entropy_discrepancy(0.3 * (1 + 1e-7), prob)
    assert abs(a - b) <= 1e-6 * max(a, 1e-12)


def test_bracketing_error_reports_probes(f0_set):
    prob = self_reference(f0_set, 5.0)
    with pytest.raises(BracketingError) as info:
        calibrate_mu(prob, bracket=(0.02, 1.0))
    assert len(info.value.mus) == 9


def test_problem_validation(f0_set):
    ref = self_reference(f0_set, 0.4).reference
    with pytest.raises(InvalidInputError):
        CalibrationProblem(f0_set, GRID, 1.0, TIMES, ref[:, ::-1])  # increasing entropy
    with pytest.raises(InvalidInputError):
        CalibrationProblem(f0_set, GRID, 1.0, TIMES[:-1], ref)
    with pytest.raises(ConfigurationError):
        CalibrationProblem(f0_set, GRID, 0.0, TIMES, ref)
    with pytest.raises(ConfigurationError):
        calibrate_mu(self_reference(f0_set, 0.4), bracket=(1.0, 0.5))
    with pytest.raises(InvalidInputError):
        entropy_discrepancy(-1.0, self_reference(f0_set, 0.4))
