"""Structure- and asymptotic-preserving network surrogates for the BGK equation.

Homogeneous problem: ``f = M exp(g)`` with ``M`` the Maxwellian of the initial
data, so positivity holds by construction and ``g`` obeys
``eps dg/dt = mu (exp(-g) - 1)``. The network reads the initial value
``g0 = log(f0 / M)`` of a velocity node together with ``t`` and returns ``g``
at that node; the velocity grid enters only through ``g0``.

Nonhomogeneous problem: a g-network ``(x, t, z) -> log f`` on all velocity
nodes and a macro-network ``(x, t, z) -> (rho, u, T)`` with softplus maps for
``rho`` and ``T``, trained on a five-term risk whose residual is scaled by
``eps`` (AP form).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .collision import RelaxationRate
from .errors import ConfigurationError, InvalidInputError, NonFiniteLossError
from .grid import (
    D_V,
    ENTROPY_FLOOR,
    MacroState,
    SpatialGrid,
    VelocityGrid,
    conserved_moments,
    local_maxwellian,
    maxwellian,
    state_from_conserved,
)
from .net import (
    LossHistory,
    MlpParams,
    Schedule,
    adam,
    forward,
    init_mlp,
    linearize,
    load_checkpoint,
    save_checkpoint,
)
from .uq import RandomInputSpec

G_MIN = -10.0
G_MAX = 4.0


def exact_hom_g(g0, t, rate: RelaxationRate) -> np.ndarray:
    """``log(1 + exp(-mu t / eps) (exp(g0) - 1))``: exact BGK evolution of ``g``."""
    decay = np.exp(-rate.frequency * np.asarray(t, dtype=float))
    return np.log1p(decay * np.expm1(np.asarray(g0, dtype=float)))


class GField(Protocol):
    def __call__(self, g0: np.ndarray, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return ``g`` and ``dg/dt`` at the given points."""


def exact_field(rate: RelaxationRate) -> GField:
    def fld(g0, t):
        g = exact_hom_g(g0, t, rate)
        decay = np.exp(-rate.frequency * t)
        # d/dt log(1 + a(t) c) = a'(t) c / (1 + a c), a' = -freq a
        c = np.expm1(g0)
        return g, -rate.frequency * decay * c / (1.0 + decay * c)

    return fld


# ------------------------------------------------------------------ homogeneous


@dataclass(frozen=True)
class HomSapnnConfig:
    rate: RelaxationRate = field(default_factory=RelaxationRate)
    t_final: float = 2.0
    hidden: tuple[int, ...] = (64, 64, 64, 64)
    w_moment: float = 1.0
    w_residual: float = 1.0
    w_boundary: float = 10.0
    w_data: float = 10.0
    n_residual: int = 512
    n_boundary: int = 256
    n_data: int = 256
    n_moment: int = 2  # time slices per step
    data_fraction: float = 0.4  # data restricted to t <= data_fraction * t_final
    g_min: float = G_MIN
    g_max: float = G_MAX
    schedule: Schedule = field(default_factory=Schedule)

    def __post_init__(self):
        ws = (self.w_moment, self.w_residual, self.w_boundary, self.w_data)
        if min(ws) < 0 or max(ws) <= 0:
            raise ConfigurationError("loss weights must be nonnegative with at least one positive")
        if not (self.t_final > 0 and self.g_max > self.g_min and 0 <= self.data_fraction <= 1):
            raise ConfigurationError("invalid time horizon, g range or data fraction")
        if min(self.n_residual, self.n_boundary, self.n_moment) < 1 or self.n_data < 0:
            raise ConfigurationError("point counts must be positive")

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (2, *self.hidden, 1)


def initial_g(f0: np.ndarray, grid: VelocityGrid, g_min: float = G_MIN, g_max: float = G_MAX):
    """``(M, clip(log(f0 / M)))`` for initial data ``f0``."""
    m = local_maxwellian(f0, grid)
    g0 = np.log(np.maximum(f0, ENTROPY_FLOOR) / m)
    return m, np.clip(g0, g_min, g_max)


def _moment_weights(grid: VelocityGrid) -> np.ndarray:
    """``phi_c(v) dv`` for the invariants ``(1, vx, vy, |v|^2/2)``; shape ``(4, n, n)``."""
    return np.stack([np.ones(grid.shape), grid.vx, grid.vy, 0.5 * grid.speed_sq]) * grid.cell_area


@dataclass(frozen=True)
class HomTrainingData:
    """A single training instance and optional supervision ``(t, node, f)`` with ``t`` in the data window."""

    grid: VelocityGrid
    f0: np.ndarray
    data_t: np.ndarray = field(default_factory=lambda: np.zeros(0))
    data_node: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    data_f: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.grid.check(self.f0)
        if np.ndim(self.f0) != 2:
            raise InvalidInputError("homogeneous training uses a single initial distribution")
        if not (len(self.data_t) == len(self.data_node) == len(self.data_f)):
            raise InvalidInputError("data arrays must have equal length")

    @classmethod
    def from_trajectory(cls, grid, f0, times, states, n_points: int, seed: int = 0) -> "HomTrainingData":
        """Random ``(time, node)`` picks from a solver trajectory ``states[time]``."""
        rng = np.random.default_rng(seed)
        ti = rng.integers(0, len(times), n_points)
        node = rng.integers(0, grid.size, n_points)
        vals = np.asarray(states).reshape(len(times), -1)[ti, node]
        return cls(grid, f0, np.asarray(times)[ti], node, vals)


class HomLossTerms:
    """Loss terms for one ``GField``; each returns value and cotangents w.r.t. ``g`` and ``dg/dt``."""

    def __init__(self, config: HomSapnnConfig, data: HomTrainingData):
        self.config = config
        self.data = data
        grid = data.grid
        self.M, g0 = initial_g(data.f0, grid, config.g_min, config.g_max)
        self.g0 = g0.ravel()
        self.Mflat = self.M.ravel()
        self.f0 = data.f0.ravel()
        self.scale = float(np.max(data.f0)) ** 2
        phi = _moment_weights(grid).reshape(4, -1)
        self.target = conserved_moments(data.f0, grid)
        # nodes sharing a g0 value give identical network outputs: sum their moment weights
        self.g0_unique, inv = np.unique(self.g0, return_inverse=True)
        self.moment_w = np.zeros((4, self.g0_unique.size))
        for c in range(4):
            np.add.at(self.moment_w[c], inv, phi[c] * self.Mflat)
        keep = (self.f0 > 1e-10 * self.f0.max()) | (self.Mflat > 1e-10 * self.Mflat.max())
        self.active = np.flatnonzero(keep)
        window = config.data_fraction * config.t_final * (1 + 1e-12)
        self.has_data = len(data.data_t) > 0
        if self.has_data and np.any(np.asarray(data.data_t) > window):
            raise InvalidInputError("training data must lie in the data time window")

    def residual(self, g, gt, g0=None, t=None):
        rate = self.config.rate
        r = rate.eps * gt - rate.mu * (np.exp(-g) - 1.0)
        n = r.size
        return float(np.mean(r**2)), 2.0 * r * rate.mu * np.exp(-g) / n, 2.0 * r * rate.eps / n

    def boundary(self, g, nodes):
        f = self.Mflat[nodes] * np.exp(g)
        diff = f - self.f0[nodes]
        n = diff.size
        return float(np.mean(diff**2) / self.scale), 2.0 * diff * f / (n * self.scale)

    def data_term(self, g, rows):
        d = self.data
        f = self.Mflat[d.data_node[rows]] * np.exp(g)
        diff = f - d.data_f[rows]
        n = diff.size
        return float(np.mean(diff**2) / self.scale), 2.0 * diff * f / (n * self.scale)

    def moment(self, g_slices):
        """``g_slices``: ``(n_slices, n_unique)`` outputs at the deduplicated ``g0`` values."""
        e = np.exp(g_slices)
        mom = e @ self.moment_w.T  # (n_slices, 4)
        diff = mom - self.target
        return float(np.sum(diff**2)), 2.0 * (diff @ self.moment_w) * e

    def sample(self, rng: np.random.Generator):
        """Collocation points for one step as ``(g0, t)`` blocks keyed by loss term."""
        cfg = self.config
        T = cfg.t_final
        n_r = cfg.n_residual
        half = n_r // 2
        g0_r = np.concatenate(
            [rng.uniform(cfg.g_min, cfg.g_max, n_r - half), self.g0[rng.choice(self.active, half)]]
        )
        blocks = {"residual": (g0_r, rng.uniform(0.0, T, n_r))}
        nodes = rng.choice(self.active, cfg.n_boundary)
        blocks["boundary"] = (self.g0[nodes], np.zeros(nodes.size))
        t_m = rng.uniform(0.0, T, cfg.n_moment)
        nu = self.g0_unique.size
        blocks["moment"] = (np.tile(self.g0_unique, cfg.n_moment), np.repeat(t_m, nu))
        extra = {"nodes": nodes}
        if self.has_data and cfg.n_data and cfg.w_data > 0:
            rows = rng.integers(0, len(self.data.data_t), cfg.n_data)
            blocks["data"] = (self.g0[self.data.data_node[rows]], self.data.data_t[rows])
            extra["rows"] = rows
        return blocks, extra

    def evaluate(self, gfield_with_grad, blocks, extra):
        """Weighted total with per-term values, plus cotangents per block."""
        cfg = self.config
        out = {}
        co = {}
        g, gt = gfield_with_grad["residual"]
        v, cg, cgt = self.residual(g, gt)
        out["residual"], co["residual"] = v, (cfg.w_residual * cg, cfg.w_residual * cgt)
        g, _ = gfield_with_grad["boundary"]
        v, cg = self.boundary(g, extra["nodes"])
        out["boundary"], co["boundary"] = v, (cfg.w_boundary * cg, np.zeros_like(cg))
        g, _ = gfield_with_grad["moment"]
        gs = g.reshape(cfg.n_moment, -1)
        v, cg = self.moment(gs)
        out["moment"], co["moment"] = v, (cfg.w_moment * cg.ravel(), np.zeros(g.size))
        if "data" in blocks:
            g, _ = gfield_with_grad["data"]
            v, cg = self.data_term(g, extra["rows"])
            out["data"], co["data"] = v, (cfg.w_data * cg, np.zeros_like(cg))
        else:
            out["data"] = 0.0
        total = (
            cfg.w_residual * out["residual"]
            + cfg.w_boundary * out["boundary"]
            + cfg.w_moment * out["moment"]
            + cfg.w_data * out["data"]
        )
        return total, out, co


def hom_residual_loss(gfield: GField, g0, t, rate: RelaxationRate) -> float:
    """Mean of ``|eps dg/dt - mu (exp(-g) - 1)|^2`` at the given points."""
    g, gt = gfield(np.asarray(g0, float), np.asarray(t, float))
    r = rate.eps * gt - rate.mu * (np.exp(-g) - 1.0)
    if not np.all(np.isfinite(r)):
        raise NonFiniteLossError("non-finite residual", int(np.flatnonzero(~np.isfinite(r))[0]))
    return float(np.mean(r**2))


def hom_moment_loss(gfield: GField, f0: np.ndarray, grid: VelocityGrid, times, target=None) -> float:
    """Sum over time slices of the squared invariant mismatch of ``M exp(g)`` against ``target``."""
    m, g0 = initial_g(f0, grid)
    target = conserved_moments(f0, grid) if target is None else np.asarray(target, float)
    total = 0.0
    for t in np.atleast_1d(times):
        g, _ = gfield(g0.ravel(), np.full(g0.size, float(t)))
        f = m * np.exp(g.reshape(grid.shape))
        total += float(np.sum((conserved_moments(f, grid) - target) ** 2))
    return total


def hom_boundary_and_data_loss(
    gfield: GField, f0: np.ndarray, grid: VelocityGrid, data_t=(), data_node=(), data_f=()
) -> tuple[float, float]:
    """Mean squared mismatch of ``M exp(g)`` with ``f0`` at ``t = 0`` and with the data points."""
    m, g0 = initial_g(f0, grid)
    g, _ = gfield(g0.ravel(), np.zeros(g0.size))
    lb = float(np.mean((m.ravel() * np.exp(g) - f0.ravel()) ** 2))
    if len(data_t) == 0:
        return lb, 0.0
    node = np.asarray(data_node, dtype=int)
    g, _ = gfield(g0.ravel()[node], np.asarray(data_t, float))
    ld = float(np.mean((m.ravel()[node] * np.exp(g) - np.asarray(data_f)) ** 2))
    return lb, ld


@dataclass(frozen=True, eq=False)
class HomSurrogate:
    """Trained homogeneous surrogate: ``f(t) = M[f0] exp(g(g0, t))``."""

    params: MlpParams
    config: HomSapnnConfig

    def encode(self, g0, t) -> np.ndarray:
        cfg = self.config
        x0 = 2.0 * (np.asarray(g0, float) - cfg.g_min) / (cfg.g_max - cfg.g_min) - 1.0
        x1 = 2.0 * np.asarray(t, float) / cfg.t_final - 1.0
        return np.stack(np.broadcast_arrays(x0, x1), axis=-1)

    @property
    def time_scale(self) -> float:
        return 2.0 / self.config.t_final

    def gfield(self, g0, t):
        lin = linearize(self.params, self.encode(g0, t).reshape(-1, 2), [1])
        return lin.Y[:, 0], lin.dY[0, :, 0] * self.time_scale

    def g(self, g0, t) -> np.ndarray:
        x = self.encode(g0, t)
        return forward(self.params, x.reshape(-1, 2)).reshape(x.shape[:-1])

    def predict(self, f0: np.ndarray, grid: VelocityGrid, t) -> np.ndarray:
        """``f`` at time(s) ``t`` for a batch of initial data; time axis first when ``t`` is an array."""
        m, g0 = initial_g(np.asarray(f0, float), grid, self.config.g_min, self.config.g_max)
        t = np.asarray(t, dtype=float)
        if np.any(t < 0) or np.any(t > self.config.t_final * (1 + 1e-12)):
            warnings.warn("prediction time outside the training horizon", stacklevel=2)
        if t.ndim == 0:
            return m * np.exp(self.g(g0, t))
        return np.stack([m * np.exp(self.g(g0, tk)) for tk in t])


HOM_TERMS = ("residual", "boundary", "moment", "data")


def hom_risk(model: HomSurrogate, terms: "HomLossTerms", blocks: dict, extra) -> tuple[float, dict, np.ndarray]:
    """Weighted risk, its parts and the parameter gradient at the sampled ``blocks``."""
    names = [k for k in HOM_TERMS if k in blocks]
    sizes = [blocks[k][0].size for k in names]
    X = np.concatenate([model.encode(*blocks[k]) for k in names])
    lin = linearize(model.params, X, [1])
    g_all, gt_all = lin.Y[:, 0], lin.dY[0, :, 0] * model.time_scale
    split = np.cumsum(sizes)[:-1]
    gg = dict(zip(names, zip(np.split(g_all, split), np.split(gt_all, split))))
    total, parts, co = terms.evaluate(gg, blocks, extra)
    cg = np.concatenate([co[k][0] for k in names])
    cgt = np.concatenate([co[k][1] for k in names]) * model.time_scale
    return total, parts, lin.pullback(cg[:, None], cgt[None, :, None])


def train_hom(
    config: HomSapnnConfig, data: HomTrainingData, seed: int | None = None, callback=None
) -> tuple[HomSurrogate, LossHistory]:
    """Train on the four-term risk ``w_m L_m + w_r L_r + w_b L_b + w_d L_d``."""
    seed = config.schedule.seed if seed is None else seed
    params0 = init_mlp(config.layer_dims, seed)
    terms = HomLossTerms(config, data)

    def objective(theta, rng, step):
        blocks, extra = terms.sample(rng)
        total, parts, grad = hom_risk(HomSurrogate(params0.with_vector(theta), config), terms, blocks, extra)
        if callback is not None:
            callback(step, total, parts)
        return total, grad, parts

    theta, history = adam(params0.to_vector(), objective, config.schedule)
    return HomSurrogate(params0.with_vector(theta), config), history


# --------------------------------------------------------------- persistence


def save_surrogate(path, params: MlpParams, kind: str, metadata: dict) -> None:
    save_checkpoint(path, params, {"kind": kind, **metadata})


def hom_metadata(s: HomSurrogate, grid: VelocityGrid) -> dict:
    cfg = s.config
    return {
        "transform": "f = M exp(g)",
        "grid": {"extent": grid.extent, "n_per_dim": grid.n_per_dim},
        "rate": {"mu": cfg.rate.mu, "eps": cfg.rate.eps},
        "t_final": cfg.t_final,
        "g_range": [cfg.g_min, cfg.g_max],
        "data_fraction": cfg.data_fraction,
        "hidden": list(cfg.hidden),
    }


def load_hom_surrogate(path) -> tuple[HomSurrogate, VelocityGrid]:
    params, meta = load_checkpoint(path)
    if meta.get("kind") != "hom":
        raise InvalidInputError(f"{path} is not a homogeneous surrogate")
    cfg = HomSapnnConfig(
        rate=RelaxationRate(**meta["rate"]),
        t_final=meta["t_final"],
        hidden=tuple(meta["hidden"]),
        g_min=meta["g_range"][0],
        g_max=meta["g_range"][1],
        data_fraction=meta["data_fraction"],
    )
    return HomSurrogate(params, cfg), VelocityGrid(**meta["grid"])


# -------------------------------------------------------------- nonhomogeneous


def softplus(a):
    return np.logaddexp(0.0, a)


def softplus_inverse(y):
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


@dataclass(frozen=True)
class NonhomSapnnConfig:
    grid: VelocityGrid
    spec: RandomInputSpec
    rate: RelaxationRate = field(default_factory=RelaxationRate)
    t_final: float = 0.0875
    hidden_g: tuple[int, ...] = (96,) * 6
    hidden_macro: tuple[int, ...] = (96,) * 6
    w_moment: float = 1.0
    w_residual: float = 1.0
    w_moment_system: float = 1.0
    w_boundary: float = 10.0
    w_data: float = 10.0
    n_moment: int = 32
    n_residual: int = 64
    n_moment_system: int = 64
    n_boundary: int = 32
    n_data: int = 64
    data_fraction: float = 0.6
    schedule: Schedule = field(default_factory=Schedule)

    def __post_init__(self):
        ws = (self.w_moment, self.w_residual, self.w_moment_system, self.w_boundary, self.w_data)
        if min(ws) < 0 or max(ws) <= 0:
            raise ConfigurationError("loss weights must be nonnegative with at least one positive")
        if not (self.t_final > 0 and 0 <= self.data_fraction <= 1):
            raise ConfigurationError("invalid time horizon or data fraction")

    @property
    def n_nodes(self) -> int:
        return self.grid.size

    @property
    def d_in(self) -> int:
        return 2 + self.spec.dim


def _macro_fields(A: np.ndarray):
    rho = softplus(A[:, 0])
    u = A[:, 1:3]
    temp = softplus(A[:, 3])
    kin = 0.5 * (np.sum(u**2, axis=-1) + D_V * temp)
    U = np.stack([rho, rho * u[:, 0], rho * u[:, 1], rho * kin], axis=-1)
    return rho, u, temp, kin, U


def _macro_pullback(A, dU, drho=0.0, du=0.0, dT=0.0) -> np.ndarray:
    """Cotangent of the macro-net outputs from cotangents of ``U`` and of ``(rho, u, T)``."""
    rho, u, temp, kin, _ = _macro_fields(A)
    drho = drho + dU[:, 0] + dU[:, 1] * u[:, 0] + dU[:, 2] * u[:, 1] + dU[:, 3] * kin
    du = du + np.stack([dU[:, 1] * rho + dU[:, 3] * rho * u[:, 0], dU[:, 2] * rho + dU[:, 3] * rho * u[:, 1]], -1)
    dT = dT + dU[:, 3] * rho * 0.5 * D_V
    return np.stack([drho * _sigmoid(A[:, 0]), du[:, 0], du[:, 1], dT * _sigmoid(A[:, 3])], axis=-1)


@dataclass(frozen=True)
class NonhomTrainingData:
    """Supervision rows ``(x, t, z) -> (f on all nodes, U)`` and the initial-state map.

    ``initial_state(x, z)`` returns a :class:`MacroState` for point arrays
    ``x`` ``(P,)`` and ``z`` ``(P, d_z)``; it supplies the initial and
    spatial-boundary targets.
    """

    points: np.ndarray  # (P, 2 + d_z)
    f: np.ndarray  # (P, n_nodes)
    U: np.ndarray  # (P, 4)
    initial_state: Callable = field(repr=False, default=None)


class NonhomLossTerms:
    def __init__(self, config: NonhomSapnnConfig, data: NonhomTrainingData | None = None):
        self.config = config
        grid = config.grid
        self.vx = grid.vx.ravel()
        self.vy = grid.vy.ravel()
        self.phi = _moment_weights(grid).reshape(4, -1)  # phi_c(v_l) dv
        self.flux_w = self.phi * self.vx  # v_x phi_c dv
        self.data = data
        if data is not None:
            if data.f.shape[1] != config.n_nodes:
                raise ConfigurationError(f"data has {data.f.shape[1]} velocity nodes, grid has {config.n_nodes}")
            window = config.data_fraction * config.t_final * (1 + 1e-12)
            if len(data.points) and np.max(data.points[:, 1]) > window:
                raise InvalidInputError("training data must lie in the data time window")
            self.scale = float(np.max(data.f)) ** 2 if data.f.size else 1.0
        else:
            self.scale = 1.0

    # each term: inputs are the fields on its block, outputs (value, cotangents)
    def residual(self, G, Gx, Gt, A):
        rate = self.config.rate
        rho, u, temp, _, _ = _macro_fields(A)
        dvx = self.vx[None, :] - u[:, :1]
        dvy = self.vy[None, :] - u[:, 1:2]
        c2 = dvx**2 + dvy**2
        log_m = (np.log(rho) - np.log(2.0 * np.pi * temp))[:, None] - c2 / (2.0 * temp[:, None])
        q = np.exp(log_m - G)
        r = rate.eps * (Gt + self.vx * Gx) - rate.mu * (q - 1.0)
        c = 2.0 * r / r.size
        dlogm = -c * rate.mu * q
        d_rho = dlogm.sum(axis=1) / rho
        d_temp = np.sum(dlogm * (-1.0 / temp[:, None] + c2 / (2.0 * temp[:, None] ** 2)), axis=1)
        d_u = np.stack([np.sum(dlogm * dvx, axis=1), np.sum(dlogm * dvy, axis=1)], -1) / temp[:, None]
        dA = _macro_pullback(A, np.zeros((A.shape[0], 4)), d_rho, d_u, d_temp)
        cot_g = (c * rate.mu * q, c * rate.eps * self.vx, c * rate.eps)
        return float(np.mean(r**2)), cot_g, (dA, np.zeros_like(A), np.zeros_like(A))

    def moment_system(self, G, Gx, Gt, A, Ax, At):
        rho, u, temp, kin, _ = _macro_fields(A)
        s0, s3 = _sigmoid(A[:, 0]), _sigmoid(A[:, 3])
        rho_t, u_t, temp_t = s0 * At[:, 0], At[:, 1:3], s3 * At[:, 3]
        Ut = np.stack(
            [
                rho_t,
                rho_t * u[:, 0] + rho * u_t[:, 0],
                rho_t * u[:, 1] + rho * u_t[:, 1],
                rho_t * kin + rho * (np.sum(u * u_t, axis=-1) + 0.5 * D_V * temp_t),
            ],
            axis=-1,
        )
        eG = np.exp(G)
        flux_x = (eG * Gx) @ self.flux_w.T
        R = Ut + flux_x
        n = R.shape[0]
        c = 2.0 * R / n
        dG = (c @ self.flux_w) * eG * Gx
        dGx = (c @ self.flux_w) * eG
        d0, d1, d2, d3 = c.T
        d_rho_t = d0 + d1 * u[:, 0] + d2 * u[:, 1] + d3 * kin
        d_rho = d1 * u_t[:, 0] + d2 * u_t[:, 1] + d3 * (np.sum(u * u_t, axis=-1) + 0.5 * D_V * temp_t)
        d_u_t = np.stack([d1 * rho + d3 * rho * u[:, 0], d2 * rho + d3 * rho * u[:, 1]], -1)
        d_temp_t = d3 * rho * 0.5 * D_V
        d_u = np.stack([d1 * rho_t + d3 * (rho_t * u[:, 0] + rho * u_t[:, 0]), d2 * rho_t + d3 * (rho_t * u[:, 1] + rho * u_t[:, 1])], -1)
        d_temp = d3 * rho_t
        dA = _macro_pullback(A, np.zeros((n, 4)), d_rho, d_u, d_temp)
        dA[:, 0] += d_rho_t * At[:, 0] * s0 * (1.0 - s0)
        dA[:, 3] += d_temp_t * At[:, 3] * s3 * (1.0 - s3)
        dAt = np.stack([d_rho_t * s0, d_u_t[:, 0], d_u_t[:, 1], d_temp_t * s3], axis=-1)
        value = float(np.mean(np.sum(R**2, axis=-1)))
        return value, (dG, dGx, np.zeros_like(G)), (dA, np.zeros_like(A), dAt)

    def moment(self, G, A):
        _, _, _, _, U = _macro_fields(A)
        eG = np.exp(G)
        D = U - eG @ self.phi.T
        n = D.shape[0]
        c = 2.0 * D / n
        dG = -(c @ self.phi) * eG
        return float(np.mean(np.sum(D**2, axis=-1))), (dG, 0 * G, 0 * G), (_macro_pullback(A, c), 0 * A, 0 * A)

    def mismatch(self, G, A, f_target, U_target):
        _, _, _, _, U = _macro_fields(A)
        eG = np.exp(G)
        df = eG - f_target
        dU = U - U_target
        n = G.shape[0]
        value = float(np.mean(df**2) / self.scale + np.mean(np.sum(dU**2, axis=-1)))
        dG = 2.0 * df * eG / (df.size * self.scale)
        return value, (dG, 0 * G, 0 * G), (_macro_pullback(A, 2.0 * dU / n), 0 * A, 0 * A)


TERM_ORDER = ("moment", "residual", "moment_system", "boundary", "data")


@dataclass(frozen=True, eq=False)
class NonhomSurrogate:
    gparams: MlpParams
    mparams: MlpParams
    config: NonhomSapnnConfig
    baseline: np.ndarray  # fixed log-reference added to the g-network output

    def encode(self, x, t, z) -> np.ndarray:
        spec = self.config.spec
        z = np.atleast_2d(np.asarray(z, float))
        zs = 2.0 * (z - spec.lower) / spec.width - 1.0
        xs = 2.0 * np.asarray(x, float) - 1.0
        ts = 2.0 * np.asarray(t, float) / self.config.t_final - 1.0
        return np.concatenate([xs[:, None], ts[:, None], zs], axis=-1)

    @property
    def scales(self) -> tuple[float, float]:
        return 2.0, 2.0 / self.config.t_final

    def fields(self, X, gparams=None, mparams=None):
        """Fields and pullbacks at encoded inputs ``X``: ``(G, Gx, Gt, A, Ax, At), pull``."""
        gl = linearize(gparams or self.gparams, X, [0, 1])
        ml = linearize(mparams or self.mparams, X, [0, 1])
        sx, st = self.scales
        G = gl.Y + self.baseline
        out = (G, gl.dY[0] * sx, gl.dY[1] * st, ml.Y, ml.dY[0] * sx, ml.dY[1] * st)

        def pull(cg, cm):
            gg = gl.pullback(cg[0], np.stack([cg[1] * sx, cg[2] * st]))
            gm = ml.pullback(cm[0], np.stack([cm[1] * sx, cm[2] * st]))
            return gg, gm

        return out, pull

    def evaluate(self, z, t, space: SpatialGrid):
        """``(f, MacroState)`` on all cells for a batch of ``z`` at time ``t``."""
        z = np.atleast_2d(np.asarray(z, float))
        if not np.all(self.config.spec.contains(z)):
            warnings.warn("surrogate queried outside its training box", stacklevel=2)
        nz, nx = z.shape[0], space.n_cells
        x = np.tile(space.centers, nz)
        X = self.encode(x, np.full(x.size, float(t)), np.repeat(z, nx, axis=0))
        G = forward(self.gparams, X) + self.baseline
        rho, u, temp, _, _ = _macro_fields(forward(self.mparams, X))
        f = np.exp(G).reshape((nz, nx) + self.config.grid.shape)
        state = MacroState(rho.reshape(nz, nx), u.reshape(nz, nx, 2), temp.reshape(nz, nx))
        return f, state


def _reference_log(data: NonhomTrainingData, grid: VelocityGrid) -> np.ndarray:
    """Log of the mean initial Maxwellian, a fixed offset for the g-network output."""
    if data is None or not len(data.U):
        return np.log(maxwellian(MacroState.of(1.0, [0.0, 0.0], 1.0), grid, warn=False)).ravel()
    st = state_from_conserved(data.U.mean(axis=0))
    return np.log(maxwellian(MacroState.of(st.rho, st.u, st.temp), grid, warn=False)).ravel()


class NonhomTrainer:
    """Assembles blocks of collocation points and the weighted five-term risk with its gradient."""

    def __init__(self, config: NonhomSapnnConfig, data: NonhomTrainingData, seed: int = 0):
        self.config = config
        self.data = data
        self.terms = NonhomLossTerms(config, data)
        L = config.n_nodes
        g0 = init_mlp((config.d_in, *config.hidden_g, L), seed)
        m0 = init_mlp((config.d_in, *config.hidden_macro, 4), seed + 1)
        self.model = NonhomSurrogate(g0, m0, config, _reference_log(data, config.grid))

    def _random_points(self, rng, n):
        spec = self.config.spec
        z = spec.lower + spec.width * rng.uniform(size=(n, spec.dim))
        return rng.uniform(0, 1, n), rng.uniform(0, self.config.t_final, n), z

    def sample(self, rng):
        cfg = self.config
        blocks = {
            "moment": self._random_points(rng, cfg.n_moment),
            "residual": self._random_points(rng, cfg.n_residual),
            "moment_system": self._random_points(rng, cfg.n_moment_system),
        }
        targets = {}
        if cfg.n_boundary and self.data.initial_state is not None:
            x, t, z = self._random_points(rng, cfg.n_boundary)
            half = cfg.n_boundary // 2
            t[:half] = 0.0  # initial line
            x[half:] = rng.integers(0, 2, cfg.n_boundary - half)  # spatial ends
            st = self.data.initial_state(x, z)
            f = maxwellian(st, cfg.grid, warn=False).reshape(len(x), -1)
            U = np.concatenate([st.rho[:, None], st.momentum, st.energy[:, None]], axis=-1)
            blocks["boundary"] = (x, t, z)
            targets["boundary"] = (f, U)
        if cfg.n_data and len(self.data.points):
            rows = rng.integers(0, len(self.data.points), cfg.n_data)
            P = self.data.points[rows]
            blocks["data"] = (P[:, 0], P[:, 1], P[:, 2:])
            targets["data"] = (self.data.f[rows], self.data.U[rows])
        return blocks, targets

    def risk(self, gparams, mparams, blocks, targets, with_grad=True):
        cfg = self.config
        names = [k for k in TERM_ORDER if k in blocks]
        X = np.concatenate([self.model.encode(*blocks[k]) for k in names])
        sizes = [len(blocks[k][0]) for k in names]
        (G, Gx, Gt, A, Ax, At), pull = self.model.fields(X, gparams, mparams)
        cuts = np.cumsum(sizes)[:-1]
        sl = dict(zip(names, np.split(np.arange(X.shape[0]), cuts)))
        weights = {
            "moment": cfg.w_moment,
            "residual": cfg.w_residual,
            "moment_system": cfg.w_moment_system,
            "boundary": cfg.w_boundary,
            "data": cfg.w_data,
        }
        cg = [np.zeros_like(G) for _ in range(3)]
        cm = [np.zeros_like(A) for _ in range(3)]
        parts = {k: 0.0 for k in TERM_ORDER}
        total = 0.0
        for k in names:
            i = sl[k]
            if k == "moment":
                v, dg, dm = self.terms.moment(G[i], A[i])
            elif k == "residual":
                v, dg, dm = self.terms.residual(G[i], Gx[i], Gt[i], A[i])
            elif k == "moment_system":
                v, dg, dm = self.terms.moment_system(G[i], Gx[i], Gt[i], A[i], Ax[i], At[i])
            else:
                v, dg, dm = self.terms.mismatch(G[i], A[i], *targets[k])
            w = weights[k]
            parts[k] = v
            total += w * v
            for j in range(3):
                cg[j][i] += w * dg[j]
                cm[j][i] += w * dm[j]
        if not math.isfinite(total):
            bad = np.flatnonzero(~np.all(np.isfinite(np.concatenate([G, A], axis=1)), axis=1))
            raise NonFiniteLossError("non-finite risk", int(bad[0]) if bad.size else None)
        if not with_grad:
            return total, parts, None
        gg, gm = pull(cg, cm)
        return total, parts, np.concatenate([gg, gm])

    def split(self, theta):
        n = self.model.gparams.n_params
        return self.model.gparams.with_vector(theta[:n]), self.model.mparams.with_vector(theta[n:])

    def train(self, callback=None) -> tuple[NonhomSurrogate, LossHistory]:
        def objective(theta, rng, step):
            gp, mp = self.split(theta)
            blocks, targets = self.sample(rng)
            total, parts, grad = self.risk(gp, mp, blocks, targets)
            if callback is not None:
                callback(step, total, parts)
            return total, grad, parts

        theta0 = np.concatenate([self.model.gparams.to_vector(), self.model.mparams.to_vector()])
        theta, history = adam(theta0, objective, self.config.schedule)
        gp, mp = self.split(theta)
        return NonhomSurrogate(gp, mp, self.config, self.model.baseline), history


def nonhom_losses(model: NonhomSurrogate, blocks: dict, targets: dict | None = None) -> dict:
    """Unweighted values of the five terms at the given ``(x, t, z)`` blocks."""
    trainer = NonhomTrainer.__new__(NonhomTrainer)
    trainer.config = model.config
    trainer.terms = NonhomLossTerms(model.config)
    trainer.model = model
    _, parts, _ = trainer.risk(model.gparams, model.mparams, blocks, targets or {}, with_grad=False)
    return parts


def train_nonhom(config: NonhomSapnnConfig, data: NonhomTrainingData, seed: int | None = None):
    seed = config.schedule.seed if seed is None else seed
    return NonhomTrainer(config, data, seed).train()


def _macro_path(path) -> str:
    return f"{path}.macro"


def save_nonhom_surrogate(path, model: NonhomSurrogate) -> None:
    """Two checkpoint files: the g-network at ``path`` and the macro-network at ``path.macro``."""
    cfg = model.config
    meta = {
        "grid": {"extent": cfg.grid.extent, "n_per_dim": cfg.grid.n_per_dim},
        "box": [list(b) for b in cfg.spec.box],
        "rate": {"mu": cfg.rate.mu, "eps": cfg.rate.eps},
        "t_final": cfg.t_final,
        "baseline": [float(b) for b in model.baseline],
    }
    save_surrogate(path, model.gparams, "nonhom-g", meta)
    save_surrogate(_macro_path(path), model.mparams, "nonhom-macro", {})


def load_nonhom_surrogate(path) -> NonhomSurrogate:
    gparams, meta = load_checkpoint(path)
    if meta.get("kind") != "nonhom-g":
        raise InvalidInputError(f"{path} is not a nonhomogeneous surrogate")
    mparams, mmeta = load_checkpoint(_macro_path(path))
    if mmeta.get("kind") != "nonhom-macro":
        raise InvalidInputError(f"{_macro_path(path)} is not a macro-network checkpoint")
    cfg = NonhomSapnnConfig(
        grid=VelocityGrid(**meta["grid"]),
        spec=RandomInputSpec(tuple(tuple(b) for b in meta["box"])),
        rate=RelaxationRate(**meta["rate"]),
        t_final=meta["t_final"],
        hidden_g=tuple(gparams.layer_dims[1:-1]),
        hidden_macro=tuple(mparams.layer_dims[1:-1]),
    )
    return NonhomSurrogate(gparams, mparams, cfg, np.asarray(meta["baseline"], dtype=float))
