"""Time integrators for the homogeneous and 1D-in-space kinetic problems and the Euler limit.

Kinetic scaling throughout: ``df/dt + v_x df/dx = C(f) / eps`` with ``C`` either
the BGK relaxation ``mu (M[f] - f)`` or the spectral Boltzmann operator.
Leading array axes before the spatial/velocity axes are sample batches.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .collision import RelaxationRate, SpectralPlan, boltzmann_operator, loss_frequency
from .errors import ConfigurationError, InvalidInputError
from .grid import (
    D_V,
    NEGATIVE_TOL,
    MacroState,
    SpatialGrid,
    VelocityGrid,
    clip_negatives,
    conservative_maxwellian,
    conserved_moments,
    local_maxwellian,
    maxwellian,
    moments,
    state_from_conserved,
)

GAMMA = (D_V + 2.0) / D_V  # = 2
VACUUM_FLOOR = 1e-10
MAX_CFL = 0.9
# spectral truncation leaves tail oscillations of relative size ~1e-11; anything beyond this is an error
SPECTRAL_NEGATIVE_TOL = 1e-8


def _check_cfl(cfl: float) -> None:
    if not (0.0 < cfl <= MAX_CFL):
        raise ConfigurationError(f"cfl must lie in (0, {MAX_CFL}], got {cfl}")


def _segments(t_out: np.ndarray, dt: float):
    """Yield (t_start, step, n_steps) covering consecutive output times with steps <= dt."""
    for a, b in zip(t_out[:-1], t_out[1:]):
        n = max(1, math.ceil((b - a) / dt - 1e-9))
        yield a, (b - a) / n, n


def _output_times(t_final: float, n_out: int | None, times) -> np.ndarray:
    if times is None:
        times = np.linspace(0.0, t_final, (n_out or 2))
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size == 0 or times[0] < 0 or np.any(np.diff(times) <= 0):
        raise InvalidInputError("output times must be nonnegative and strictly increasing")
    if times[0] > 0:
        times = np.concatenate([[0.0], times])
    return times


# ----------------------------------------------------------------- homogeneous


@dataclass(frozen=True)
class HomTrajectory:
    """States at ``times``; ``states`` has shape ``(n_times, *batch, n, n)``."""

    times: np.ndarray
    states: np.ndarray
    grid: VelocityGrid
    steady_from: float | None = None  # time after which the run was frozen at steady state

    def __post_init__(self):
        if np.any(np.diff(self.times) <= 0):
            raise InvalidInputError("trajectory times must be strictly increasing")
        if self.states.shape[0] != self.times.size:
            raise InvalidInputError("one state per time required")
        self.grid.check(self.states)

    def at(self, t: float) -> np.ndarray:
        idx = np.flatnonzero(np.isclose(self.times, t, rtol=0, atol=1e-12))
        if idx.size == 0:
            raise InvalidInputError(f"time {t} is not an output time")
        return self.states[idx[0]]


def solve_hom_bgk(f0: np.ndarray, grid: VelocityGrid, rate: RelaxationRate, t) -> np.ndarray:
    """Exact solution ``M + exp(-mu t / eps) (f0 - M)``.

    ``t`` may be a scalar or a 1D array of times; in the latter case the time
    axis is prepended.
    """
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise InvalidInputError("time must be nonnegative")
    m = local_maxwellian(f0, grid)
    if t.ndim == 0:
        decay = math.exp(-rate.frequency * float(t))
        return m + decay * (f0 - m)
    decay = np.exp(-rate.frequency * t).reshape((-1,) + (1,) * np.ndim(f0))
    return m + decay * (f0 - m)


def hom_bgk_trajectory(f0, grid, rate, times) -> HomTrajectory:
    times = np.asarray(times, dtype=float)
    return HomTrajectory(times, solve_hom_bgk(f0, grid, rate, times), grid)


def max_stable_dt(f: np.ndarray, eps: float, plan: SpectralPlan) -> float:
    """``eps / (2 nu_max)``, with ``nu`` the pointwise loss frequency."""
    nu = float(np.max(loss_frequency(f, plan)))
    return math.inf if nu <= 0 else eps / (2.0 * nu)


def solve_hom_boltzmann(
    f0: np.ndarray,
    eps: float,
    t_final: float,
    plan: SpectralPlan,
    dt: float | None = None,
    n_out: int | None = None,
    times=None,
    steady_tol: float | None = None,
) -> HomTrajectory:
    """Heun (RK2) integration of ``df/dt = Q(f, f) / eps``.

    ``dt`` defaults to ``0.01 eps``. With ``steady_tol`` set, stepping stops
    once the relative L1 change per step of every batch member falls below it,
    and later outputs repeat the final state.
    """
    if eps <= 0 or t_final < 0:
        raise ConfigurationError("eps must be positive and t_final nonnegative")
    dt = 0.01 * eps if dt is None else float(dt)
    f = np.asarray(f0, dtype=float)
    plan.grid.check(f)
    limit = max_stable_dt(f, eps, plan)
    if not dt > 0 or dt > limit * (1 + 1e-12):
        raise ConfigurationError(f"dt={dt:.3g} violates the explicit stability bound {limit:.3g}")
    t_out = _output_times(t_final, n_out, times)
    states = np.empty((t_out.size,) + f.shape)
    states[0] = f
    steady_from = None
    scale = np.sum(np.abs(f), axis=(-2, -1))
    for k, (t0, h, n) in enumerate(_segments(t_out, dt), start=1):
        if steady_from is None:
            for i in range(n):
                k1 = boltzmann_operator(f, plan)
                k2 = boltzmann_operator(f + (h / eps) * k1, plan)
                change = (0.5 * h / eps) * (k1 + k2)
                f = clip_negatives(f + change, SPECTRAL_NEGATIVE_TOL)
                if steady_tol is not None:
                    rel = np.sum(np.abs(change), axis=(-2, -1)) / scale
                    if np.max(rel) < steady_tol:
                        steady_from = t0 + (i + 1) * h
                        break
        states[k] = f
    return HomTrajectory(t_out, states, plan.grid, steady_from)


# ------------------------------------------------------------- 1D kinetic field


@dataclass(frozen=True)
class KineticField:
    """``values`` has shape ``(*batch, n_cells, n, n)``."""

    space: SpatialGrid
    velocity: VelocityGrid
    values: np.ndarray
    time: float = 0.0
    boundary_flux: np.ndarray | None = field(default=None, repr=False)  # time-integrated net outflow of (mass, mx, my, E)

    def __post_init__(self):
        shape = np.shape(self.values)
        if len(shape) < 3 or shape[-3] != self.space.n_cells:
            raise InvalidInputError(f"values shape {shape} does not match {self.space.n_cells} cells")
        self.velocity.check(self.values)
        if not np.all(np.isfinite(self.values)):
            raise InvalidInputError("non-finite kinetic field")

    @classmethod
    def from_macro(cls, space: SpatialGrid, velocity: VelocityGrid, state: MacroState) -> "KineticField":
        return cls(space, velocity, maxwellian(state, velocity))

    def macro(self) -> MacroState:
        return moments(self.values, self.velocity)

    def conserved(self) -> np.ndarray:
        """Per-cell ``(rho, rho u_x, rho u_y, E)``."""
        return conserved_moments(self.values, self.velocity)

    def totals(self) -> np.ndarray:
        return self.conserved().sum(axis=-2) * self.space.dx


def _minmod(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # zero unless a and b share a sign, else the one of smaller magnitude
    return np.maximum(np.minimum(a, b), 0.0) + np.minimum(np.maximum(a, b), 0.0)


def _pad_cells(q: np.ndarray, axis: int, width: int = 2) -> np.ndarray:
    pad = [(0, 0)] * q.ndim
    pad[axis] = (width, width)
    return np.pad(q, pad, mode="edge")


def _face_states(f: np.ndarray, from_left: bool) -> np.ndarray:
    """MUSCL-minmod reconstruction at the ``n_cells + 1`` faces from the upwind side."""
    g = _pad_cells(f, axis=-3)
    d = np.diff(g, axis=-3)
    if from_left:
        slope = _minmod(d[..., :-2, :, :], d[..., 1:-1, :, :])  # cells 1 .. n+1 of padded
        return g[..., 1:-2, :, :] + 0.5 * slope
    slope = _minmod(d[..., 1:-1, :, :], d[..., 2:, :, :])  # cells 2 .. n+2
    return g[..., 2:-1, :, :] - 0.5 * slope


def _kinetic_fluxes(f: np.ndarray, vx: np.ndarray) -> np.ndarray:
    """Upwind interface fluxes ``v_x f``; the first half of the x-velocity nodes is negative."""
    h = vx.shape[0] // 2
    flux = np.empty(f.shape[:-3] + (f.shape[-3] + 1,) + f.shape[-2:])
    flux[..., :h, :] = vx[:h] * _face_states(f[..., :h, :], from_left=False)
    flux[..., h:, :] = vx[h:] * _face_states(f[..., h:, :], from_left=True)
    return flux


def _transport_stage(f, vx, dx):
    flux = _kinetic_fluxes(f, vx)
    return -(flux[..., 1:, :, :] - flux[..., :-1, :, :]) / dx, flux


def transport_step(f: np.ndarray, grid: VelocityGrid, dx: float, dt: float):
    """SSP-RK2 step of ``df/dt + v_x df/dx = 0``; returns (f, time-weighted boundary flux field)."""
    vx = grid.vx
    r1, fl1 = _transport_stage(f, vx, dx)
    f1 = f + dt * r1
    r2, fl2 = _transport_stage(f1, vx, dx)
    out = 0.5 * f + 0.5 * (f1 + dt * r2)
    # net outflow through both ends: right face minus left face
    net = 0.5 * dt * ((fl1[..., -1, :, :] - fl1[..., 0, :, :]) + (fl2[..., -1, :, :] - fl2[..., 0, :, :]))
    return out, net


def relax_bgk(f: np.ndarray, grid: VelocityGrid, rate: RelaxationRate, tau: float) -> np.ndarray:
    """Exact local relaxation over ``tau`` (moments are frozen by the BGK map)."""
    m = conservative_maxwellian(f, grid)
    return m + math.exp(-rate.frequency * tau) * (f - m)


def kinetic_dt(space: SpatialGrid, velocity: VelocityGrid, cfl: float) -> float:
    vmax = float(np.max(np.abs(velocity.nodes)))
    return cfl * space.dx / vmax


def _run_split(init: KineticField, t_final: float, cfl: float, collide, clip: bool = True) -> KineticField:
    _check_cfl(cfl)
    if t_final < 0:
        raise InvalidInputError("t_final must be nonnegative")
    grid, dx = init.velocity, init.space.dx
    dt_max = kinetic_dt(init.space, grid, cfl)
    n = max(1, math.ceil(t_final / dt_max - 1e-9)) if t_final > 0 else 0
    dt = t_final / n if n else 0.0
    f = np.array(init.values, dtype=float)
    outflow = np.zeros(f.shape[:-3] + grid.shape)
    for i in range(n):
        # adjacent half steps of consecutive Strang steps are fused into one
        f = collide(f, 0.5 * dt if i == 0 else dt)
        f, net = transport_step(f, grid, dx, dt)
        outflow += net
        if clip:
            f = clip_negatives(f, NEGATIVE_TOL)
    if n:
        f = collide(f, 0.5 * dt)
    total_out = conserved_moments(outflow, grid)
    prior = init.boundary_flux if init.boundary_flux is not None else 0.0
    return KineticField(init.space, grid, f, init.time + t_final, prior + total_out)


def solve_bgk_1d(init: KineticField, rate: RelaxationRate, t_final: float, cfl: float = 0.5) -> KineticField:
    """Strang splitting: exact relaxation (dt/2), MUSCL transport (dt), exact relaxation (dt/2).

    The exact relaxation map keeps the scheme stable for any ``eps``.
    """
    grid = init.velocity
    return _run_split(init, t_final, cfl, lambda f, tau: relax_bgk(f, grid, rate, tau))


def solve_boltzmann_1d(
    init: KineticField, eps: float, t_final: float, plan: SpectralPlan, cfl: float = 0.5
) -> KineticField:
    """Strang splitting with the spectral Boltzmann operator, RK2 sub-stepped within each half step.

    The spectral operator is not positivity preserving; small negative tail
    values on coarse velocity grids are kept rather than clipped so that the
    scheme stays exactly conservative.
    """
    if plan.grid != init.velocity:
        raise ConfigurationError("spectral plan was built for a different velocity grid")

    def collide(f, tau):
        nu = float(np.max(loss_frequency(f, plan)))
        m = max(1, math.ceil(tau * 2.0 * nu / eps - 1e-9))
        h = tau / m
        for _ in range(m):
            k1 = boltzmann_operator(f, plan)
            k2 = boltzmann_operator(f + (h / eps) * k1, plan)
            f = f + (0.5 * h / eps) * (k1 + k2)
        return f

    return _run_split(init, t_final, cfl, collide, clip=False)


# ---------------------------------------------------------------------- Euler


@dataclass(frozen=True)
class EulerField:
    """Per-cell conservative variables ``(rho, rho u_x, rho u_y, E)``, shape ``(*batch, n_cells, 4)``."""

    space: SpatialGrid
    U: np.ndarray
    time: float = 0.0
    vacuum: bool = False  # set when the positivity floor was activated

    def __post_init__(self):
        if np.shape(self.U)[-2:] != (self.space.n_cells, 4):
            raise InvalidInputError(f"U shape {np.shape(self.U)} does not end in ({self.space.n_cells}, 4)")
        if not np.all(np.isfinite(self.U)):
            raise InvalidInputError("non-finite Euler state")

    @classmethod
    def from_macro(cls, space: SpatialGrid, state: MacroState) -> "EulerField":
        state.validate()
        U = np.concatenate(
            [np.asarray(state.rho)[..., None], state.momentum, np.asarray(state.energy)[..., None]], axis=-1
        )
        return cls(space, np.broadcast_to(U, np.broadcast_shapes(U.shape, (space.n_cells, 4))).copy())

    def macro(self) -> MacroState:
        return state_from_conserved(self.U)

    def totals(self) -> np.ndarray:
        return self.U.sum(axis=-2) * self.space.dx


def _primitive(U: np.ndarray):
    rho = U[..., 0]
    u = U[..., 1:3] / rho[..., None]
    p = (GAMMA - 1.0) * (U[..., 3] - 0.5 * rho * np.sum(u**2, axis=-1))
    return rho, u, p


def _conservative(rho, u, p) -> np.ndarray:
    E = p / (GAMMA - 1.0) + 0.5 * rho * np.sum(u**2, axis=-1)
    return np.concatenate([rho[..., None], rho[..., None] * u, E[..., None]], axis=-1)


def _physical_flux(rho, u, p) -> np.ndarray:
    U = _conservative(rho, u, p)
    ux = u[..., 0]
    flux = U * ux[..., None]
    flux[..., 1] += p
    flux[..., 3] += p * ux
    return flux


def _floor(U: np.ndarray) -> tuple[np.ndarray, bool]:
    rho, u, p = _primitive(U)
    hit = bool(np.any(rho <= VACUUM_FLOOR) or np.any(p <= VACUUM_FLOOR * VACUUM_FLOOR))
    if not hit:
        return U, False
    low = rho <= VACUUM_FLOOR
    rho = np.maximum(rho, VACUUM_FLOOR)
    u = np.where(low[..., None], 0.0, u)
    p = np.maximum(p, VACUUM_FLOOR * VACUUM_FLOOR)
    return _conservative(rho, u, p), True


def _euler_rhs(U: np.ndarray, dx: float):
    rho, u, p = _primitive(U)
    W = np.concatenate([rho[..., None], u, p[..., None]], axis=-1)
    Wg = _pad_cells(W, axis=-2)
    d = np.diff(Wg, axis=-2)
    slope = _minmod(d[..., :-1, :], d[..., 1:, :])
    WL = Wg[..., 1:-2, :] + 0.5 * slope[..., :-1, :]
    WR = Wg[..., 2:-1, :] - 0.5 * slope[..., 1:, :]
    # first-order fallback where the reconstruction would be nonphysical
    bad_l = (WL[..., 0] <= 0) | (WL[..., 3] <= 0)
    bad_r = (WR[..., 0] <= 0) | (WR[..., 3] <= 0)
    WL = np.where(bad_l[..., None], Wg[..., 1:-2, :], WL)
    WR = np.where(bad_r[..., None], Wg[..., 2:-1, :], WR)
    rl, ul, pl = WL[..., 0], WL[..., 1:3], WL[..., 3]
    rr, ur, pr = WR[..., 0], WR[..., 1:3], WR[..., 3]
    fl, fr = _physical_flux(rl, ul, pl), _physical_flux(rr, ur, pr)
    speed = np.maximum(
        np.abs(ul[..., 0]) + np.sqrt(GAMMA * pl / rl), np.abs(ur[..., 0]) + np.sqrt(GAMMA * pr / rr)
    )
    flux = 0.5 * (fl + fr) - 0.5 * speed[..., None] * (_conservative(rr, ur, pr) - _conservative(rl, ul, pl))
    return -(flux[..., 1:, :] - flux[..., :-1, :]) / dx, flux


def _max_speed(U: np.ndarray) -> float:
    rho, u, p = _primitive(U)
    return float(np.max(np.abs(u[..., 0]) + np.sqrt(GAMMA * np.maximum(p, 0.0) / rho)))


def solve_euler_1d(init: EulerField, t_final: float, cfl: float = 0.5) -> EulerField:
    """Rusanov flux, MUSCL-minmod on primitive variables, SSP-RK2; gamma = 2."""
    _check_cfl(cfl)
    if t_final < 0:
        raise InvalidInputError("t_final must be nonnegative")
    dx = init.space.dx
    U = np.array(init.U, dtype=float)
    rho, _, p = _primitive(U)
    if np.any(rho <= 0) or np.any(p <= 0):
        raise InvalidInputError("initial density and internal energy must be positive")
    t, vacuum = 0.0, init.vacuum
    while t < t_final * (1 - 1e-14):
        dt = min(cfl * dx / _max_speed(U), t_final - t)
        r1, _ = _euler_rhs(U, dx)
        U1, v1 = _floor(U + dt * r1)
        r2, _ = _euler_rhs(U1, dx)
        U, v2 = _floor(0.5 * U + 0.5 * (U1 + dt * r2))
        vacuum = vacuum or v1 or v2
        t += dt
    if vacuum and not init.vacuum:
        warnings.warn("Euler solver hit the vacuum floor; positivity floor applied", stacklevel=2)
    return EulerField(init.space, U, init.time + t_final, vacuum)
