"""Initial data for the benchmark problems, each parametrized by a random input ``z``.

Every problem maps a batch of ``z`` values (shape ``(batch, d_z)``) to initial
distributions with the batch axis leading.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import MacroState, SpatialGrid, VelocityGrid, maxwellian
from .solvers import EulerField, KineticField
from .uq import RandomInputSpec


def _as_batch(z, dim: int) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.ndim == 1 and dim == 1:
        z = z[:, None]
    if z.ndim == 1:
        z = z[None, :]
    if z.shape[-1] != dim:
        raise ValueError(f"expected z with {dim} components, got shape {z.shape}")
    return z


@dataclass(frozen=True)
class TwoBump:
    """Two Gaussian bumps at ``s(z) -+ (d, d)``, ``s(z) = z1 (sin 2 pi z2, cos 2 pi z2)``.

    Each bump is ``rho0/(2 pi) exp(-|v - c|^2 / sigma)``, so the total mass is
    ``rho0 * sigma`` and the temperature is ``sigma/2 + d^2``.
    """

    rho0: float = 0.75
    sigma: float = 0.5
    d: float = 1.5
    extent: float = 10.0

    @property
    def random_input(self) -> RandomInputSpec:
        return RandomInputSpec(((-1.0, 1.0), (0.0, 1.0)))

    def shift(self, z) -> np.ndarray:
        z = _as_batch(z, 2)
        ang = 2.0 * np.pi * z[:, 1]
        return z[:, :1] * np.stack([np.sin(ang), np.cos(ang)], axis=-1)

    def initial(self, z, grid: VelocityGrid) -> np.ndarray:
        s = self.shift(z)[:, :, None, None]
        out = 0.0
        for sign in (1.0, -1.0):
            cx = s[:, 0] + sign * self.d
            cy = s[:, 1] + sign * self.d
            out = out + np.exp(-((grid.vx - cx) ** 2 + (grid.vy - cy) ** 2) / self.sigma)
        return self.rho0 / (2.0 * np.pi) * out

    def equilibrium(self, z) -> MacroState:
        """Closed-form moments of the mixture."""
        s = self.shift(z)
        n = s.shape[0]
        return MacroState.of(
            np.full(n, self.rho0 * self.sigma), s, np.full(n, self.sigma / 2.0 + self.d**2)
        )


@dataclass(frozen=True)
class RiemannProblem:
    """Two-state equilibrium data split at ``x = 0.5``.

    ``left``/``right`` return ``(rho, ux, uy, T)`` arrays for a batch of ``z``.
    """

    name: str
    extent: float
    t_final: float
    spec: RandomInputSpec

    def states(self, z) -> tuple[np.ndarray, np.ndarray]:  # pragma: no cover - abstract
        raise NotImplementedError

    def macro(self, z, space: SpatialGrid) -> MacroState:
        left, right = self.states(_as_batch(z, self.spec.dim))
        is_left = (space.centers <= 0.5)[None, :, None]
        w = np.where(is_left, left[:, None, :], right[:, None, :])
        return MacroState.of(w[..., 0], w[..., 1:3], w[..., 3])

    def kinetic(self, z, space: SpatialGrid, grid: VelocityGrid) -> KineticField:
        return KineticField(space, grid, maxwellian(self.macro(z, space), grid))

    def euler(self, z, space: SpatialGrid) -> EulerField:
        return EulerField.from_macro(space, self.macro(z, space))


def _rows(*cols) -> np.ndarray:
    return np.stack(np.broadcast_arrays(*cols), axis=-1).astype(float)


@dataclass(frozen=True)
class Sod(RiemannProblem):
    """``(rho, T) = (1, 1 + s z) | (0.125, 0.8 + s z)``, at rest."""

    amplitude: float = 0.25

    def states(self, z):
        z = z[:, 0]
        zero = np.zeros_like(z)
        return (
            _rows(1.0 + zero, zero, zero, 1.0 + self.amplitude * z),
            _rows(0.125 + zero, zero, zero, 0.8 + self.amplitude * z),
        )


@dataclass(frozen=True)
class Lax(RiemannProblem):
    def states(self, z):
        zero = np.zeros(z.shape[0])
        return (
            _rows(0.445 + 0.02 * z[:, 0], 0.698 + zero, zero, 3.528 + zero),
            _rows(0.5 + zero, zero, zero, 0.571 + 0.02 * z[:, 1]),
        )


@dataclass(frozen=True)
class DoubleRarefaction(RiemannProblem):
    def states(self, z):
        zero = np.zeros(z.shape[0])
        return (
            _rows(1.0 + zero, -2.0 + 0.05 * z[:, 0], zero, 0.4 + zero),
            _rows(1.0 + zero, 2.0 + 0.05 * z[:, 1], zero, 0.4 + zero),
        )


def sod(amplitude: float = 0.25) -> Sod:
    return Sod("sod", 8.0, 0.0875, RandomInputSpec(((-1.0, 1.0),)), amplitude)


def lax() -> Lax:
    return Lax("lax", 15.0, 0.04375, RandomInputSpec(((-1.0, 1.0), (-1.0, 1.0))))


def double_rarefaction() -> DoubleRarefaction:
    return DoubleRarefaction("double-rarefaction", 8.0, 0.1, RandomInputSpec(((-1.0, 1.0), (-1.0, 1.0))))


RIEMANN_PROBLEMS = {"sod": sod, "lax": lax, "double-rarefaction": double_rarefaction}
