"""Feed-forward tanh networks with exact input derivatives and parameter gradients.

``linearize`` runs the network together with forward-mode tangents along a few
input directions and returns a pullback that maps cotangents of both the
outputs and the tangents back to a flat parameter gradient (forward-over-reverse).
Inputs are row batches ``(N, d_in)``.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigurationError, DivergenceError, InvalidInputError, NonFiniteLossError

CHECKPOINT_MAGIC = b"KUQNET01"
ACTIVATION = "tanh"
DIVERGENCE_FACTOR = 1e6


@dataclass(frozen=True, eq=False)
class MlpParams:
    """Weights ``W[l]`` of shape ``(out, in)`` and biases ``b[l]``; tanh on hidden layers."""

    layer_dims: tuple[int, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    activation: str = ACTIVATION
    seed: int | None = None

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2 or min(dims) < 1:
            raise ConfigurationError(f"invalid layer dims {dims}")
        if self.activation != ACTIVATION:
            raise ConfigurationError(f"unsupported activation {self.activation!r}")
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ConfigurationError("one weight matrix and bias per layer required")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (dims[l + 1], dims[l]) or b.shape != (dims[l + 1],):
                raise ConfigurationError(f"layer {l} has shapes {W.shape}, {b.shape}")

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    @property
    def d_in(self) -> int:
        return self.layer_dims[0]

    @property
    def d_out(self) -> int:
        return self.layer_dims[-1]

    def to_vector(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in zip(self.weights, self.biases)])

    def with_vector(self, theta: np.ndarray) -> "MlpParams":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise InvalidInputError(f"expected {self.n_params} parameters, got {theta.shape}")
        Ws, bs, k = [], [], 0
        for W, b in zip(self.weights, self.biases):
            Ws.append(theta[k : k + W.size].reshape(W.shape))
            k += W.size
            bs.append(theta[k : k + b.size].copy())
            k += b.size
        return MlpParams(self.layer_dims, tuple(Ws), tuple(bs), self.activation, self.seed)


def init_mlp(layer_dims, seed: int = 0) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    dims = tuple(int(d) for d in layer_dims)
    Ws, bs = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        Ws.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        bs.append(np.zeros(fan_out))
    return MlpParams(dims, tuple(Ws), tuple(bs), ACTIVATION, seed)


def _check_input(params: MlpParams, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != params.d_in:
        raise InvalidInputError(f"input must have shape (N, {params.d_in}), got {X.shape}")
    return X


def forward(params: MlpParams, X) -> np.ndarray:
    q = _check_input(params, X)
    last = len(params.weights) - 1
    for l, (W, b) in enumerate(zip(params.weights, params.biases)):
        a = q @ W.T + b
        q = a if l == last else np.tanh(a)
    return q


def _directions(params: MlpParams, directions, n: int) -> np.ndarray:
    """``(n_dir, N, d_in)`` input tangents from axis indices or direction vectors."""
    dirs = []
    for d in directions:
        if isinstance(d, (int, np.integer)):
            if not 0 <= d < params.d_in:
                raise InvalidInputError(f"input axis {d} out of range")
            e = np.zeros(params.d_in)
            e[d] = 1.0
        else:
            e = np.asarray(d, dtype=float)
            if e.shape != (params.d_in,):
                raise InvalidInputError("direction vectors must have length d_in")
        dirs.append(np.broadcast_to(e, (n, params.d_in)))
    return np.stack(dirs) if dirs else np.zeros((0, n, params.d_in))


@dataclass
class Linearization:
    """Outputs ``Y`` ``(N, d_out)``, tangents ``dY`` ``(n_dir, N, d_out)`` and the pullback."""

    Y: np.ndarray
    dY: np.ndarray
    pullback: Callable[[np.ndarray, np.ndarray | None], np.ndarray] = field(repr=False)


def linearize(params: MlpParams, X, directions=()) -> Linearization:
    X = _check_input(params, X)
    qdot = _directions(params, directions, X.shape[0])
    q = X
    last = len(params.weights) - 1
    tape = []
    for l, (W, b) in enumerate(zip(params.weights, params.biases)):
        a = q @ W.T + b
        adot = qdot @ W.T
        if l == last:
            tape.append((q, qdot, None))
            q, qdot = a, adot
        else:
            nxt = np.tanh(a)
            tape.append((q, qdot, nxt))
            q, qdot = nxt, (1.0 - nxt**2) * adot
    Y, dY = q, qdot

    def pullback(gY: np.ndarray, gdY: np.ndarray | None = None) -> np.ndarray:
        gq = np.asarray(gY, dtype=float)
        gqdot = np.zeros_like(dY) if gdY is None else np.asarray(gdY, dtype=float)
        if gq.shape != Y.shape or gqdot.shape != dY.shape:
            raise InvalidInputError("cotangent shapes must match outputs and tangents")
        grads = [None] * len(params.weights)
        for l in range(last, -1, -1):
            W = params.weights[l]
            q_in, qdot_in, out = tape[l]
            if out is None:
                ga, gadot = gq, gqdot
            else:
                s = 1.0 - out**2
                adot = qdot_in @ W.T
                gadot = s * gqdot
                gs = np.sum(adot * gqdot, axis=0)
                ga = (gq - 2.0 * out * gs) * s
            gW = ga.T @ q_in + np.einsum("kno,kni->oi", gadot, qdot_in)
            gb = ga.sum(axis=0)
            grads[l] = np.concatenate([gW.ravel(), gb])
            if l:
                gq = ga @ W
                gqdot = gadot @ W
        return np.concatenate(grads)

    return Linearization(Y, dY, pullback)


def input_jacobian(params: MlpParams, x) -> np.ndarray:
    """``d_out x d_in`` Jacobian at a single input point, one tangent pass per input axis."""
    lin = linearize(params, np.asarray(x, dtype=float)[None, :], range(params.d_in))
    return lin.dY[:, 0, :].T


@dataclass(frozen=True)
class GradientReport:
    value: float
    gradient: np.ndarray
    parts: dict = field(default_factory=dict)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.gradient))


LossFn = Callable[[np.ndarray, np.ndarray], tuple[float, np.ndarray, np.ndarray]]


def _first_bad_row(*arrays) -> int | None:
    for A in arrays:
        A = np.asarray(A)
        if A.ndim == 3:  # (n_dir, N, d)
            A = np.moveaxis(A, 0, 1)
        rows = A.reshape(A.shape[0], -1)
        bad = np.flatnonzero(~np.all(np.isfinite(rows), axis=1))
        if bad.size:
            return int(bad[0])
    return None


def loss_gradient(params: MlpParams, X, directions, loss_fn: LossFn) -> GradientReport:
    """Gradient of ``loss_fn(Y, dY)`` with respect to all parameters.

    ``loss_fn`` returns ``(value, dL/dY, dL/d(dY))``; ``dY`` are the network's
    input-directional derivatives along ``directions``.
    """
    X = _check_input(params, X)
    lin = linearize(params, X, directions)
    value, gY, gdY = loss_fn(lin.Y, lin.dY)
    if not math.isfinite(value):
        raise NonFiniteLossError("non-finite loss", _first_bad_row(X, lin.Y, lin.dY, gY, gdY))
    with np.errstate(invalid="ignore", over="ignore"):
        grad = lin.pullback(gY, gdY)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteLossError("non-finite gradient", _first_bad_row(X, gY, gdY))
    return GradientReport(float(value), grad)


# ------------------------------------------------------------------ optimizer


@dataclass(frozen=True)
class Schedule:
    steps: int = 1000
    learning_rate: float = 1e-3
    final_learning_rate: float | None = None  # geometric decay toward this value
    log_every: int = 100
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    floor: float = 1e-8

    def __post_init__(self):
        if self.steps < 0 or self.learning_rate <= 0 or self.log_every < 1:
            raise ConfigurationError("steps >= 0, learning_rate > 0 and log_every >= 1 required")

    def rate(self, step: int) -> float:
        if self.final_learning_rate is None or self.steps <= 1:
            return self.learning_rate
        frac = step / (self.steps - 1)
        return self.learning_rate * (self.final_learning_rate / self.learning_rate) ** frac


@dataclass
class LossHistory:
    steps: list = field(default_factory=list)
    totals: list = field(default_factory=list)
    parts: list = field(default_factory=list)

    def record(self, step: int, total: float, parts: dict) -> None:
        self.steps.append(int(step))
        self.totals.append(float(total))
        self.parts.append({k: float(v) for k, v in parts.items()})

    def to_csv(self, path) -> None:
        names = sorted({k for p in self.parts for k in p})
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "total", *names])
            for s, t, p in zip(self.steps, self.totals, self.parts):
                w.writerow([s, repr(t), *(repr(p.get(k, float("nan"))) for k in names)])


# objective(theta, rng, step) -> (value, gradient, parts)
Objective = Callable[[np.ndarray, np.random.Generator, int], tuple[float, np.ndarray, dict]]


def adam(theta0: np.ndarray, objective: Objective, schedule: Schedule) -> tuple[np.ndarray, LossHistory]:
    """Adam on a flat parameter vector; aborts with :class:`DivergenceError` on blow-up."""
    theta = np.array(theta0, dtype=float)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    rng = np.random.default_rng(schedule.seed)
    history = LossHistory()
    initial = None
    b1, b2 = schedule.beta1, schedule.beta2
    for step in range(schedule.steps):
        value, grad, parts = objective(theta, rng, step)
        if initial is None:
            initial = max(abs(value), 1e-300)
        if not math.isfinite(value) or value > DIVERGENCE_FACTOR * initial:
            history.record(step, value, parts)
            raise DivergenceError(f"loss {value:.3e} at step {step} exceeds {DIVERGENCE_FACTOR:g} x initial", history)
        if step % schedule.log_every == 0 or step == schedule.steps - 1:
            history.record(step, value, parts)
        m = b1 * m + (1.0 - b1) * grad
        v = b2 * v + (1.0 - b2) * grad**2
        mhat = m / (1.0 - b1 ** (step + 1))
        vhat = v / (1.0 - b2 ** (step + 1))
        theta = theta - schedule.rate(step) * mhat / (np.sqrt(vhat) + schedule.floor)
    return theta, history


def optimize(params: MlpParams, objective: Objective, schedule: Schedule) -> tuple[MlpParams, LossHistory]:
    theta, history = adam(params.to_vector(), objective, schedule)
    return params.with_vector(theta), history


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, params: MlpParams, metadata: dict | None = None) -> None:
    """Magic, little-endian u32 header length, JSON header, little-endian float64 parameters."""
    header = {
        "layer_dims": list(params.layer_dims),
        "activation": params.activation,
        "seed": params.seed,
        "n_params": params.n_params,
        "metadata": metadata or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(params.to_vector().astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[MlpParams, dict]:
    data = Path(path).read_bytes()
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise InvalidInputError(f"{path} is not a network checkpoint")
    k = len(CHECKPOINT_MAGIC)
    (n,) = struct.unpack("<I", data[k : k + 4])
    header = json.loads(data[k + 4 : k + 4 + n])
    theta = np.frombuffer(data[k + 4 + n :], dtype="<f8").astype(float)
    template = init_mlp(header["layer_dims"], 0)
    if theta.size != template.n_params:
        raise InvalidInputError(f"{path}: expected {template.n_params} parameters, found {theta.size}")
    params = template.with_vector(theta)
    params = MlpParams(params.layer_dims, params.weights, params.biases, header["activation"], header["seed"])
    return params, header.get("metadata", {})
