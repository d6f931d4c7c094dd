import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kinuq.collision import RelaxationRate, bgk_operator, boltzmann_operator, build_spectral_plan, loss_frequency
from kinuq.errors import ConfigurationError, GridMismatchError
from kinuq.grid import MacroState, VelocityGrid, conserved_moments, maxwellian, moments


def bkw(grid, t):
    """2D BKW solution for the unit-loss-frequency Maxwell kernel: S = 1 - exp(-t/8)/2."""
    S = 1.0 - 0.5 * np.exp(-t / 8.0)
    r2 = grid.speed_sq
    return 1.0 / (2 * np.pi * S) * np.exp(-r2 / (2 * S)) * ((2 * S - 1) / S + (1 - S) / (2 * S**2) * r2)


def two_maxwellians(grid):
    return maxwellian(MacroState.of(1.0, [1.0, 0.5], 1.2), grid) + maxwellian(MacroState.of(0.5, [-1.0, -1.0], 0.8), grid)


def random_smooth(grid, rng):
    """Positive sum of three randomly placed Gaussians."""
    f = 0.0
    for _ in range(3):
        u = rng.uniform(-1.5, 1.5, 2)
        f = f + maxwellian(MacroState.of(rng.uniform(0.2, 1.0), u, rng.uniform(0.4, 1.5)), grid)
    return f


def test_relaxation_rate_validation():
    assert RelaxationRate(2.0, 0.5).frequency == 4.0
    with pytest.raises(ConfigurationError):
        RelaxationRate(0.0, 1.0)
    with pytest.raises(ConfigurationError):
        RelaxationRate(1.0, -1.0)


def test_bgk_annihilates_maxwellian(grid64):
    m = maxwellian(MacroState.of(1.3, [0.4, -0.2], 0.9), grid64)
    assert np.max(np.abs(bgk_operator(m, grid64, RelaxationRate(1.0, 1.0)))) < 1e-10


def test_bgk_conserves(grid64, rng):
    f = random_smooth(grid64, rng)
    U = conserved_moments(bgk_operator(f, grid64, RelaxationRate(1.0, 1.0)), grid64)
    assert np.max(np.abs(U)) <= 1e-8


def test_bgk_two_bump_direct_formula(grid64, two_bump):
    f0 = two_bump.initial([[0.0, 0.0]], grid64)[0]
    # Maxwellian with the closed-form mixture moments (mass rho0*sigma, T = sigma/2 + d^2)
    m = maxwellian(MacroState.of(0.375, [0.0, 0.0], 0.25 + 2.25), grid64)
    np.testing.assert_allclose(bgk_operator(f0, grid64, RelaxationRate(1.0, 1.0)), m - f0, atol=1e-10)


def test_bgk_linear_in_mu(grid64, two_bump):
    f0 = two_bump.initial([[0.2, 0.1]], grid64)[0]
    q1 = bgk_operator(f0, grid64, RelaxationRate(1.0, 1.0))
    np.testing.assert_allclose(bgk_operator(f0, grid64, RelaxationRate(2.5, 1.0)), 2.5 * q1, rtol=1e-13, atol=1e-16)


def test_plan_weights_finite_and_hermitian():
    plan = build_spectral_plan(VelocityGrid(10.0, 32), 8)
    W = plan.gain_weights
    assert np.isrealobj(W) and np.all(np.isfinite(W)) and np.all(np.isfinite(plan.loss_weights))
    # real kernels: the k_y = 0 column of a real-to-complex layout must be even in k_x
    col = W[..., 0]
    np.testing.assert_array_equal(col, col[:, (-np.arange(plan.n_pad)) % plan.n_pad])


def test_plan_is_deterministic():
    g = VelocityGrid(10.0, 32)
    a, b = build_spectral_plan(g, 8), build_spectral_plan(g, 8)
    assert a.gain_weights.tobytes() == b.gain_weights.tobytes()
    assert a.loss_weights.tobytes() == b.loss_weights.tobytes()


@pytest.mark.parametrize("n_angle", [2, 3, 7])
def test_plan_rejects_bad_angle_counts(n_angle):
    with pytest.raises(ConfigurationError):
        build_spectral_plan(VelocityGrid(10.0, 32), n_angle)


def test_angular_convergence_from_default(grid64):
    f = two_maxwellians(grid64)
    q16 = boltzmann_operator(f, build_spectral_plan(grid64, 16))
    q32 = boltzmann_operator(f, build_spectral_plan(grid64, 32))
    assert np.abs(q16 - q32).sum() / np.abs(q32).sum() < 1e-6


@pytest.mark.xfail(strict=True, reason="eight angles leave a 1e-3 relative quadrature error; default is 16")
def test_angular_convergence_eight_to_sixteen(grid64):
    f = two_maxwellians(grid64)
    q8 = boltzmann_operator(f, build_spectral_plan(grid64, 8))
    q16 = boltzmann_operator(f, build_spectral_plan(grid64, 16))
    assert np.abs(q8 - q16).sum() / np.abs(q16).sum() < 1e-6


def test_boltzmann_equilibrium(grid64, plan64):
    m = maxwellian(MacroState.of(1.0, [0.0, 0.0], 1.0), grid64)
    assert np.abs(boltzmann_operator(m, plan64)).sum() * grid64.cell_area <= 1e-6


def test_boltzmann_matches_bkw_time_derivative(grid64, plan64):
    h = 1e-4
    for t in (0.0, 0.5, 2.0):
        dfdt = (bkw(grid64, t + h) - bkw(grid64, t - h)) / (2 * h)
        q = boltzmann_operator(bkw(grid64, t), plan64)
        assert np.abs(q - dfdt).sum() / np.abs(dfdt).sum() < 1e-4


def test_loss_frequency_is_density(grid64, plan64, two_bump):
    f = two_bump.initial([[0.3, 0.4]], grid64)[0]
    nu = loss_frequency(f, plan64)
    # constant kernel normalized to unit frequency: nu(v) = rho on the resolved ball
    centre = grid64.speed_sq < 9.0
    np.testing.assert_allclose(nu[centre], moments(f, grid64).rho, rtol=1e-6)


def test_boltzmann_batch_matches_single(grid64, plan64, two_bump):
    F = two_bump.initial([[0.3, 0.4], [-0.5, 0.9]], grid64)
    Q = boltzmann_operator(F, plan64)
    np.testing.assert_allclose(Q[1], boltzmann_operator(F[1], plan64), atol=1e-15)


def test_boltzmann_plan_mismatch(plan64):
    with pytest.raises(GridMismatchError):
        boltzmann_operator(np.ones((32, 32)), plan64)


def test_entropy_production_sign(grid64, plan64):
    rng = np.random.default_rng(7)
    for _ in range(50):
        f = random_smooth(grid64, rng)
        q = boltzmann_operator(f, plan64)
        assert np.sum(q * (1.0 + np.log(f))) * grid64.cell_area <= 1e-8


@given(seed=st.integers(0, 2**32 - 1))
def test_conservation_property(grid64, plan64, seed):
    f = random_smooth(grid64, np.random.default_rng(seed))
    U = conserved_moments(boltzmann_operator(f, plan64), grid64)
    assert np.max(np.abs(U)) <= 1e-6
