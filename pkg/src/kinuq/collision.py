"""BGK relaxation and the fast Fourier-spectral Boltzmann collision operator.

The Boltzmann operator is the 2D Maxwell pseudo-molecule kernel written in
Carleman form and evaluated with the decoupled angular quadrature of the
fast spectral method: with ``x, y`` restricted to the disc of radius ``R``,

    B(l, m) = B_c * int_0^pi phi(l . e_t) phi(m . e_t^perp) dt,
    phi(s) = 2R sinc(pi R s / L),

and the trapezoid rule in ``t`` turns the gain term into ``n_angle`` products
of filtered copies of ``f``. The constant kernel is normalized so that the
loss term is ``rho * f`` (collision frequency equal to the density).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft

from .errors import ConfigurationError, GridMismatchError, InvalidInputError
from .grid import VelocityGrid, local_maxwellian

# (3 + sqrt 2)/2: minimal period/support ratio that keeps the periodized gain term alias-free
ANTIALIAS_FACTOR = (3.0 + np.sqrt(2.0)) / 2.0
# sigma-representation kernel b = 1/(2 pi) gives unit loss frequency; Carleman constant is 2b
CARLEMAN_CONSTANT = 1.0 / np.pi
DEFAULT_N_ANGLE = 16
CHUNK_BYTES = 256 * 2**20


@dataclass(frozen=True)
class RelaxationRate:
    mu: float = 1.0
    eps: float = 1.0

    def __post_init__(self):
        if not (self.mu > 0 and self.eps > 0):
            raise ConfigurationError(f"mu and eps must be positive, got mu={self.mu}, eps={self.eps}")

    @property
    def frequency(self) -> float:
        return self.mu / self.eps


def bgk_operator(f: np.ndarray, grid: VelocityGrid, rate: RelaxationRate) -> np.ndarray:
    """``mu * (M[f] - f)``."""
    return rate.mu * (local_maxwellian(f, grid) - f)


@dataclass(frozen=True, eq=False)
class SpectralPlan:
    grid: VelocityGrid
    n_angle: int
    n_pad: int
    period: float  # half-period L of the padded box
    radius: float  # truncation R of the Carleman variables
    gain_weights: np.ndarray = field(repr=False)  # (n_angle, n_pad, n_pad//2 + 1)
    loss_weights: np.ndarray = field(repr=False)  # (n_pad, n_pad//2 + 1)

    @property
    def n_modes(self) -> int:
        return self.grid.n_per_dim

    @property
    def offset(self) -> int:
        return (self.n_pad - self.grid.n_per_dim) // 2


def _padded_size(n: int, factor: float) -> int:
    m = int(np.ceil(n * factor))
    while True:
        m = sfft.next_fast_len(m, real=True)
        if m % 2 == 0:
            return m
        m += 1


def build_spectral_plan(grid: VelocityGrid, n_angle: int = DEFAULT_N_ANGLE) -> SpectralPlan:
    """Precompute the angular-quadrature convolution weights for ``grid``.

    The support radius is taken as the grid half-width ``S``; the grid is
    zero-padded to a period ``L >= (3 + sqrt 2) S / 2`` and ``R = 2 S``.
    """
    if n_angle < 4 or n_angle % 2:
        raise ConfigurationError(f"n_angle must be even and >= 4, got {n_angle}")
    n = grid.n_per_dim
    if n % 2:
        raise ConfigurationError("spectral plan needs an even number of velocity points")
    support = grid.extent
    n_pad = _padded_size(n, ANTIALIAS_FACTOR)
    period = 0.5 * n_pad * grid.spacing
    radius = 2.0 * support

    kx = sfft.fftfreq(n_pad, d=1.0 / n_pad)[:, None]
    ky = sfft.rfftfreq(n_pad, d=1.0 / n_pad)[None, :]
    theta = np.pi * np.arange(n_angle) / n_angle
    c = np.cos(theta)[:, None, None]
    s = np.sin(theta)[:, None, None]

    def phi(arg):
        # np.sinc(x) = sin(pi x)/(pi x)
        return 2.0 * radius * np.sinc(radius * arg / period)

    along = phi(kx * c + ky * s)
    # the orthogonal direction of angle j is angle j + n_angle/2 (phi is even)
    across = np.roll(along, -(n_angle // 2), axis=0)
    weight = CARLEMAN_CONSTANT * np.pi / n_angle
    loss = weight * np.sum(along * across, axis=0)
    gain = np.sqrt(weight) * along
    gain.setflags(write=False)
    loss.setflags(write=False)
    return SpectralPlan(grid, n_angle, n_pad, period, radius, gain, loss)


def _pad(f: np.ndarray, plan: SpectralPlan) -> np.ndarray:
    n, o = plan.n_modes, plan.offset
    out = np.zeros(f.shape[:-2] + (plan.n_pad, plan.n_pad))
    out[..., o : o + n, o : o + n] = f
    return out


def _crop(g: np.ndarray, plan: SpectralPlan) -> np.ndarray:
    n, o = plan.n_modes, plan.offset
    return g[..., o : o + n, o : o + n]


def _check(f: np.ndarray, plan: SpectralPlan) -> None:
    if np.shape(f)[-2:] != plan.grid.shape:
        raise GridMismatchError(f"distribution shape {np.shape(f)} does not match plan grid {plan.grid.shape}")


def boltzmann_operator(f: np.ndarray, plan: SpectralPlan, workers: int | None = None) -> np.ndarray:
    """Spectral ``Q(f, f)``; leading axes of ``f`` are treated as a batch."""
    _check(f, plan)
    if not np.all(np.isfinite(f)):
        raise InvalidInputError("non-finite values in distribution")
    f = np.asarray(f, dtype=float)
    batch = f.shape[:-2]
    per_item = plan.gain_weights.size * 16 * 2
    chunk = max(1, CHUNK_BYTES // per_item)
    if len(batch) and int(np.prod(batch)) > chunk:
        flat = f.reshape((-1,) + f.shape[-2:])
        out = np.concatenate(
            [_collide(flat[i : i + chunk], plan, workers) for i in range(0, flat.shape[0], chunk)]
        )
        return out.reshape(f.shape)
    return _collide(f, plan, workers)


def _collide(f: np.ndarray, plan: SpectralPlan, workers: int | None) -> np.ndarray:
    padded = _pad(f, plan)
    fhat = sfft.rfft2(padded, workers=workers)
    shape = (plan.n_pad, plan.n_pad)
    filtered = sfft.irfft2(plan.gain_weights * fhat[..., None, :, :], s=shape, workers=workers)
    half = plan.n_angle // 2
    gain = 2.0 * np.sum(filtered[..., :half, :, :] * filtered[..., half:, :, :], axis=-3)
    loss_freq = sfft.irfft2(plan.loss_weights * fhat, s=shape, workers=workers)
    return _crop(gain - padded * loss_freq, plan)


def loss_frequency(f: np.ndarray, plan: SpectralPlan) -> np.ndarray:
    """Pointwise loss frequency ``nu(v)`` with ``Q^-(f) = nu f``."""
    _check(f, plan)
    fhat = sfft.rfft2(_pad(np.asarray(f, dtype=float), plan))
    return _crop(sfft.irfft2(plan.loss_weights * fhat, s=(plan.n_pad, plan.n_pad)), plan)
