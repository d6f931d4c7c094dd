import numpy as np
import pytest
from riemann_exact import sample

from kinuq.collision import RelaxationRate, build_spectral_plan
from kinuq.errors import ConfigurationError, InvalidInputError
from kinuq.grid import MacroState, SpatialGrid, VelocityGrid, entropy, local_maxwellian, maxwellian
from kinuq.problems import double_rarefaction, lax, sod
from kinuq.solvers import (
    EulerField,
    KineticField,
    hom_bgk_trajectory,
    solve_bgk_1d,
    solve_boltzmann_1d,
    solve_euler_1d,
    solve_hom_bgk,
    solve_hom_boltzmann,
)


def test_exact_bgk_closed_form(grid64, two_bump):
    f0 = two_bump.initial([[0.6, 0.2]], grid64)[0]
    m = local_maxwellian(f0, grid64)
    rate = RelaxationRate(0.7, 0.5)
    for t in (0.0, 0.3, 1.7):
        expected = m + np.exp(-0.7 * t / 0.5) * (f0 - m)
        np.testing.assert_allclose(solve_hom_bgk(f0, grid64, rate, t), expected, rtol=0, atol=1e-15)


def test_exact_bgk_time_axis(grid64, two_bump):
    F0 = two_bump.initial([[0.6, 0.2], [0.1, 0.9]], grid64)
    traj = hom_bgk_trajectory(F0, grid64, RelaxationRate(), [0.0, 1.0, 2.0])
    assert traj.states.shape == (3, 2, 64, 64)
    np.testing.assert_allclose(traj.at(0.0), F0, rtol=0, atol=1e-15)
    with pytest.raises(InvalidInputError):
        solve_hom_bgk(F0, grid64, RelaxationRate(), -1.0)


def test_hom_boltzmann_conserves_and_dissipates(grid64, plan64, two_bump):
    f0 = two_bump.initial([[0.5, 0.25]], grid64)[0]
    traj = solve_hom_boltzmann(f0, 1.0, 1.0, plan64, dt=0.05, n_out=11)
    U = np.array([np.sum(s) for s in traj.states]) * grid64.cell_area
    # the spectral operator conserves to its 1e-6 relative defect per unit collision time
    assert np.max(np.abs(U - U[0])) / U[0] < 1e-6
    H = entropy(traj.states, grid64)
    assert np.all(np.diff(H) <= 1e-8)
    assert H[-1] < H[0]


def test_hom_boltzmann_rejects_unstable_step(grid64, plan64, two_bump):
    f0 = two_bump.initial([[0.0, 0.0]], grid64)[0]
    with pytest.raises(ConfigurationError):
        solve_hom_boltzmann(f0, 1e-3, 0.01, plan64, dt=0.01)


def test_hom_boltzmann_steady_stop(grid64, plan64):
    m = maxwellian(MacroState.of(1.0, [0.0, 0.0], 1.0), grid64)
    traj = solve_hom_boltzmann(m, 1.0, 1.0, plan64, dt=0.1, n_out=3, steady_tol=1e-10)
    assert traj.steady_from == pytest.approx(0.1)
    np.testing.assert_array_equal(traj.states[1], traj.states[2])


def test_bgk_1d_conservation_with_boundary_flux():
    prob = sod()
    space, grid = SpatialGrid(40), VelocityGrid(8.0, 16)
    init = prob.kinetic([0.3], space, grid)
    out = solve_bgk_1d(init, RelaxationRate(1.0, 1e-2), prob.t_final)
    balance = out.totals() + out.boundary_flux - init.totals()
    assert np.max(np.abs(balance)) < 1e-13
    assert out.time == pytest.approx(prob.t_final)
    assert np.all(out.values >= 0)


def test_bgk_1d_uniform_state_is_steady():
    space, grid = SpatialGrid(8), VelocityGrid(8.0, 16)
    init = KineticField.from_macro(space, grid, MacroState.of(np.ones(8), np.zeros((8, 2)), np.ones(8)))
    out = solve_bgk_1d(init, RelaxationRate(1.0, 1e-3), 0.05)
    np.testing.assert_allclose(out.values, init.values, atol=1e-14)


def test_bgk_1d_rejects_bad_cfl():
    prob = sod()
    init = prob.kinetic([0.0], SpatialGrid(8), VelocityGrid(8.0, 16))
    with pytest.raises(ConfigurationError):
        solve_bgk_1d(init, RelaxationRate(), 0.01, cfl=1.5)


def test_boltzmann_1d_conservation():
    prob = sod()
    space, grid = SpatialGrid(20), VelocityGrid(8.0, 32)  # 16^2 under-resolves the Sod collision term
    plan = build_spectral_plan(grid, 8)
    init = prob.kinetic([-0.4], space, grid)
    out = solve_boltzmann_1d(init, 1e-2, 0.02, plan)
    balance = out.totals() + out.boundary_flux - init.totals()
    # transport balances to round-off; what remains is the collision defect, 1e-6 relative at most
    assert np.max(np.abs(balance) / np.abs(init.totals()).max()) < 1e-6


def test_boltzmann_1d_plan_mismatch():
    init = sod().kinetic([0.0], SpatialGrid(8), VelocityGrid(8.0, 16))
    with pytest.raises(ConfigurationError):
        solve_boltzmann_1d(init, 1.0, 0.01, build_spectral_plan(VelocityGrid(8.0, 32), 8))


def test_euler_sod_against_exact_riemann_solution():
    prob = sod()
    space = SpatialGrid(400)
    out = solve_euler_1d(prob.euler([0.0], space), prob.t_final)
    # (rho, u, p) with p = rho T; gamma = 2 for two velocity dimensions
    exact = sample((1.0, 0.0, 1.0), (0.125, 0.0, 0.1), 2.0, (space.centers - 0.5) / prob.t_final)
    err = np.abs(out.macro().rho[0] - exact[:, 0]).sum() * space.dx
    assert err < 5e-3


def test_euler_conserves_away_from_boundaries():
    prob = lax()
    space = SpatialGrid(100)
    init = prob.euler([[0.2, -0.3]], space)
    out = solve_euler_1d(init, prob.t_final)
    # waves stay inside the domain, so totals only change by the constant boundary fluxes
    rho_l, u_l = 0.445 + 0.004, 0.698
    p_l = rho_l * 3.528
    p_r = 0.5 * (0.571 - 0.006)
    flux_l = np.array([rho_l * u_l, rho_l * u_l**2 + p_l, 0.0, u_l * (p_l / 1.0 + 0.5 * rho_l * u_l**2 + p_l)])
    flux_r = np.array([0.0, p_r, 0.0, 0.0])
    expected = init.totals()[0] + prob.t_final * (flux_l - flux_r)
    np.testing.assert_allclose(out.totals()[0], expected, atol=1e-12)


def test_euler_double_rarefaction_stays_positive():
    prob = double_rarefaction()
    out = solve_euler_1d(prob.euler([[0.5, -0.5]], SpatialGrid(100)), prob.t_final)
    st = out.macro()
    assert np.all(st.rho > 0) and np.all(st.temp > 0)


def test_euler_field_validation():
    with pytest.raises(InvalidInputError):
        EulerField(SpatialGrid(4), np.zeros((3, 4)))


def test_bgk_1d_approaches_euler():
    prob = sod()
    space, grid = SpatialGrid(50), VelocityGrid(8.0, 24)
    eu = solve_euler_1d(prob.euler([0.0], space), prob.t_final).U[0]
    errs = []
    for eps in (1e-2, 1e-4):
        k = solve_bgk_1d(prob.kinetic([0.0], space, grid), RelaxationRate(1.0, eps), prob.t_final)
        errs.append(np.abs(k.conserved()[0] - eu).sum() * space.dx)
    assert errs[1] < errs[0]
