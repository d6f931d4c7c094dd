"""Entropy-matching calibration of the BGK relaxation frequency against Boltzmann trajectories."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from .collision import RelaxationRate, SpectralPlan
from .errors import BracketingError, ConfigurationError, InvalidInputError
from .grid import VelocityGrid, entropy
from .solvers import solve_hom_bgk, solve_hom_boltzmann

MONOTONE_TOL = 1e-8
DEFAULT_CHECKPOINTS = 50


@dataclass(frozen=True)
class CalibrationProblem:
    """Initial data ``f0_set`` (batch axis first), checkpoint times and reference entropy curves.

    ``reference`` has shape ``(n_initial, n_times)``.
    """

    f0_set: np.ndarray
    grid: VelocityGrid
    eps: float
    times: np.ndarray
    reference: np.ndarray

    def __post_init__(self):
        f0 = np.asarray(self.f0_set, dtype=float)
        if f0.ndim == 2:
            f0 = f0[None]
        object.__setattr__(self, "f0_set", f0)
        ref = np.atleast_2d(np.asarray(self.reference, dtype=float))
        object.__setattr__(self, "reference", ref)
        self.grid.check(f0)
        if self.eps <= 0:
            raise ConfigurationError("eps must be positive")
        if ref.shape != (f0.shape[0], np.size(self.times)):
            raise InvalidInputError(f"reference shape {ref.shape} does not match {f0.shape[0]} x {np.size(self.times)}")
        if np.any(np.diff(ref, axis=-1) > MONOTONE_TOL):
            raise InvalidInputError("reference entropy curves must be nonincreasing")

    @classmethod
    def from_boltzmann(
        cls,
        f0_set: np.ndarray,
        eps: float,
        horizon: float,
        plan: SpectralPlan,
        n_times: int = DEFAULT_CHECKPOINTS,
        dt: float | None = None,
    ) -> "CalibrationProblem":
        """Reference curves from the spectral Boltzmann solver at ``n_times`` uniform checkpoints."""
        times = np.linspace(0.0, horizon, n_times)
        traj = solve_hom_boltzmann(f0_set, eps, horizon, plan, dt=dt, times=times)
        ref = np.moveaxis(entropy(traj.states, plan.grid), 0, -1)
        return cls(f0_set, plan.grid, eps, times, ref)

    def bgk_entropy(self, mu: float) -> np.ndarray:
        states = solve_hom_bgk(self.f0_set, self.grid, RelaxationRate(mu, self.eps), self.times)
        return np.moveaxis(entropy(states, self.grid), 0, -1)


def entropy_discrepancy(mu: float, problem: CalibrationProblem) -> float:
    """Root-mean-square entropy mismatch over the checkpoints, averaged over the initial data."""
    if not mu > 0:
        raise InvalidInputError("mu must be positive")
    diff = problem.bgk_entropy(mu) - problem.reference
    return float(np.mean(np.sqrt(np.mean(diff**2, axis=-1))))


def sweep(problem: CalibrationProblem, mus) -> np.ndarray:
    return np.array([entropy_discrepancy(float(m), problem) for m in mus])


@dataclass(frozen=True)
class CalibrationResult:
    mu: float
    discrepancy: float
    n_evaluations: int
    probes: tuple[tuple[float, float], ...]

    @property
    def inverse(self) -> float:
        return 1.0 / self.mu


def calibrate_mu(
    problem: CalibrationProblem, bracket=(0.02, 2.0), rtol: float = 1e-3, n_scan: int = 9
) -> CalibrationResult:
    """Golden-section minimization of the entropy discrepancy in ``log mu``.

    A log-spaced scan of ``n_scan`` points over the bracket locates the
    coarse minimum first; if it sits on either end a :class:`BracketingError`
    is raised, otherwise golden section refines between its neighbours.
    """
    lo, hi = float(bracket[0]), float(bracket[1])
    if not 0 < lo < hi:
        raise ConfigurationError(f"bracket must satisfy 0 < lo < hi, got {bracket}")
    if n_scan < 3:
        raise ConfigurationError("n_scan must be at least 3")
    mus = np.geomspace(lo, hi, n_scan)
    probes = [(float(m), entropy_discrepancy(float(m), problem)) for m in mus]
    values = [j for _, j in probes]
    k = int(np.argmin(values))
    if k in (0, n_scan - 1):
        raise BracketingError([m for m, _ in probes], values)
    res = minimize_scalar(
        lambda s: entropy_discrepancy(math.exp(s), problem),
        bracket=(math.log(mus[k - 1]), math.log(mus[k]), math.log(mus[k + 1])),
        method="golden",
        # absolute tolerance in log(mu) is a relative tolerance in mu; scipy's test is on the bracket width
        options={"xtol": rtol / 4.0},
    )
    mu = math.exp(float(res.x))
    return CalibrationResult(mu, float(res.fun), int(res.nfev) + n_scan, tuple(probes))
