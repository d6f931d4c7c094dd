"""Velocity and space discretizations, Maxwellians, moments, entropy and norms.

Distributions are plain numpy arrays whose two trailing axes index the
velocity nodes ``(i, j)`` of a :class:`VelocityGrid` (``v = (v_i, v_j)``).
Any leading axes (samples, spatial cells, time slices) are broadcast over.
The gas constant is 1 and the velocity dimension is 2 throughout.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ConfigurationError, DegenerateStateError, GridMismatchError, InvalidInputError

D_V = 2
NEGATIVE_TOL = 1e-12
ENTROPY_FLOOR = 1e-300


@dataclass(frozen=True)
class VelocityGrid:
    """Uniform midpoint lattice over ``[-extent, extent]^2``."""

    extent: float
    n_per_dim: int

    def __post_init__(self):
        if self.n_per_dim < 4 or self.n_per_dim % 2:
            raise ConfigurationError(f"n_per_dim must be even and >= 4, got {self.n_per_dim}")
        if not self.extent > 0:
            raise ConfigurationError(f"extent must be positive, got {self.extent}")

    @cached_property
    def spacing(self) -> float:
        return 2.0 * self.extent / self.n_per_dim

    @cached_property
    def cell_area(self) -> float:
        return self.spacing**2

    @cached_property
    def nodes(self) -> np.ndarray:
        """1D node coordinates (shared by both velocity axes)."""
        return -self.extent + (np.arange(self.n_per_dim) + 0.5) * self.spacing

    @cached_property
    def vx(self) -> np.ndarray:
        return np.broadcast_to(self.nodes[:, None], self.shape)

    @cached_property
    def vy(self) -> np.ndarray:
        return np.broadcast_to(self.nodes[None, :], self.shape)

    @cached_property
    def speed_sq(self) -> np.ndarray:
        return self.vx**2 + self.vy**2

    @cached_property
    def invariants(self) -> np.ndarray:
        """``(1, vx, vy, |v|^2/2) dv`` at every node, shape ``(n*n, 4)``."""
        phi = np.stack([np.ones(self.shape), self.vx, self.vy, 0.5 * self.speed_sq], axis=-1)
        return phi.reshape(self.size, 4) * self.cell_area

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_per_dim, self.n_per_dim)

    @property
    def size(self) -> int:
        return self.n_per_dim**2

    def check(self, f: np.ndarray) -> None:
        if np.shape(f)[-2:] != self.shape:
            raise GridMismatchError(f"distribution shape {np.shape(f)} does not end in {self.shape}")


@dataclass(frozen=True)
class SpatialGrid:
    """Uniform cells on ``[0, 1]``."""

    n_cells: int

    def __post_init__(self):
        if self.n_cells < 2:
            raise ConfigurationError("need at least two spatial cells")

    @property
    def dx(self) -> float:
        return 1.0 / self.n_cells

    @cached_property
    def centers(self) -> np.ndarray:
        return (np.arange(self.n_cells) + 0.5) * self.dx


@dataclass(frozen=True)
class MacroState:
    """Density, bulk velocity (trailing axis of length 2) and temperature.

    Fields may be scalars or arrays with matching leading shapes.
    """

    rho: np.ndarray
    u: np.ndarray
    temp: np.ndarray

    @classmethod
    def of(cls, rho, u, temp) -> "MacroState":
        return cls(np.asarray(rho, dtype=float), np.asarray(u, dtype=float), np.asarray(temp, dtype=float))

    @property
    def energy(self) -> np.ndarray:
        return 0.5 * self.rho * (np.sum(self.u**2, axis=-1) + D_V * self.temp)

    @property
    def pressure(self) -> np.ndarray:
        return self.rho * self.temp

    @property
    def momentum(self) -> np.ndarray:
        return self.rho[..., None] * self.u

    def validate(self) -> None:
        for name in ("rho", "u", "temp"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise InvalidInputError(f"non-finite {name} in macroscopic state")
        if np.shape(self.u)[-1:] != (D_V,):
            raise InvalidInputError(f"velocity must have trailing axis {D_V}, got shape {np.shape(self.u)}")
        if np.any(self.rho <= 0) or np.any(self.temp <= 0):
            raise InvalidInputError("density and temperature must be positive")


def maxwellian(state: MacroState, grid: VelocityGrid, warn: bool = True) -> np.ndarray:
    """Discrete local Maxwellian ``rho/(2 pi T) exp(-|v-u|^2 / (2T))``."""
    state.validate()
    rho = np.asarray(state.rho)[..., None, None]
    temp = np.asarray(state.temp)[..., None, None]
    ux = np.asarray(state.u)[..., 0, None, None]
    uy = np.asarray(state.u)[..., 1, None, None]
    if warn:
        reach = np.abs(state.u).max(axis=-1) + 6.0 * np.sqrt(state.temp)
        if np.any(reach > grid.extent):
            warnings.warn(
                f"velocity grid extent {grid.extent} does not cover |u| + 6 sqrt(T) = {np.max(reach):.3g}",
                stacklevel=2,
            )
    # separable in the two velocity components: 2n exponentials instead of n^2
    ex = np.exp(-((grid.nodes[:, None] - ux) ** 2) / (2.0 * temp))
    ey = np.exp(-((grid.nodes[None, :] - uy) ** 2) / (2.0 * temp))
    return (rho / (2.0 * np.pi * temp)) * ex * ey


def conserved_moments(f: np.ndarray, grid: VelocityGrid) -> np.ndarray:
    """Quadrature of ``f * (1, vx, vy, |v|^2/2)``; trailing axis of length 4."""
    grid.check(f)
    f = np.asarray(f, dtype=float)
    return f.reshape(f.shape[:-2] + (grid.size,)) @ grid.invariants


def state_from_conserved(U: np.ndarray) -> MacroState:
    """Invert ``(rho, rho u_x, rho u_y, E)`` to a :class:`MacroState`."""
    rho = U[..., 0]
    if np.any(~(rho > 0)):
        raise DegenerateStateError("nonpositive or non-finite discrete mass")
    u = U[..., 1:3] / rho[..., None]
    temp = (U[..., 3] - 0.5 * rho * np.sum(u**2, axis=-1)) / (D_V * rho)
    return MacroState(rho, u, temp)


def moments(f: np.ndarray, grid: VelocityGrid) -> MacroState:
    """Density, mean velocity and temperature of ``f`` by midpoint quadrature."""
    if not np.all(np.isfinite(f)):
        raise InvalidInputError("non-finite values in distribution")
    U = conserved_moments(f, grid)
    rho = U[..., 0]
    if np.any(~(rho > 0)):
        raise DegenerateStateError("nonpositive discrete mass")
    u = U[..., 1:3] / rho[..., None]
    # direct central moment is more accurate than E - rho|u|^2/2 for cold states;
    # it separates into the two velocity marginals of f
    cx2 = (grid.nodes - u[..., 0, None]) ** 2
    cy2 = (grid.nodes - u[..., 1, None]) ** 2
    spread = np.sum(f.sum(axis=-1) * cx2, axis=-1) + np.sum(f.sum(axis=-2) * cy2, axis=-1)
    temp = spread * grid.cell_area / (D_V * rho)
    return MacroState(rho, u, temp)


def local_maxwellian(f: np.ndarray, grid: VelocityGrid) -> np.ndarray:
    """``M[f]``: the Maxwellian sharing the moments of ``f``."""
    return maxwellian(moments(f, grid), grid, warn=False)


def conservative_maxwellian(f: np.ndarray, grid: VelocityGrid) -> np.ndarray:
    """``M[f] (1 + a . phi)`` with ``a`` chosen so the discrete invariants match those of ``f`` exactly.

    The correction removes the quadrature mismatch of the discrete Maxwellian
    (of order round-off for well-resolved states).
    """
    m = local_maxwellian(f, grid)
    phi = grid.invariants / grid.cell_area  # (n*n, 4)
    pairs = (phi[:, :, None] * grid.invariants[:, None, :]).reshape(grid.size, 16)
    flat = m.reshape(m.shape[:-2] + (grid.size,))
    gram = (flat @ pairs).reshape(m.shape[:-2] + (4, 4))
    defect = conserved_moments(f, grid) - flat @ grid.invariants
    coef = np.linalg.solve(gram, defect[..., None])[..., 0]
    return m * (1.0 + (coef @ phi.T).reshape(m.shape))


def clip_negatives(f: np.ndarray, tol: float = NEGATIVE_TOL) -> np.ndarray:
    """Zero out round-off negatives; raise if any value is below ``-tol * max(f)``."""
    fmax = np.max(f) if np.size(f) else 0.0
    fmin = np.min(f) if np.size(f) else 0.0
    if fmin < -tol * max(fmax, 0.0):
        raise InvalidInputError(f"distribution has negative values down to {fmin:.3e} (max {fmax:.3e})")
    return np.maximum(f, 0.0)


def entropy(f: np.ndarray, grid: VelocityGrid) -> np.ndarray:
    """Quadrature of ``f log f`` with ``0 log 0 = 0``."""
    grid.check(f)
    f = clip_negatives(np.asarray(f, dtype=float))
    safe = np.where(f > ENTROPY_FLOOR, f, 1.0)
    return np.sum(f * np.log(safe), axis=(-2, -1)) * grid.cell_area


def weighted_norm(f: np.ndarray, grid: VelocityGrid, s: int = 0, p: int = 1, dx: float | None = None) -> np.ndarray:
    """``(int |f|^p (1+|v|)^s dv [dx])^(1/p)``.

    With ``dx`` given, the axis just before the velocity axes is treated as
    space and integrated too.
    """
    if p not in (1, 2):
        raise InvalidInputError("p must be 1 or 2")
    if s < 0:
        raise InvalidInputError("s must be nonnegative")
    grid.check(f)
    weight = (1.0 + np.sqrt(grid.speed_sq)) ** s
    total = np.sum(np.abs(f) ** p * weight, axis=(-2, -1)) * grid.cell_area
    if dx is not None:
        total = total.sum(axis=-1) * dx
    return total ** (1.0 / p)
