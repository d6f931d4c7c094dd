"""Experiment configuration read from a TOML file.

Unknown sections or keys are rejected so that a typo cannot silently fall
back to a default. The raw text is kept and copied next to the outputs.
"""

from __future__ import annotations

import hashlib
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigurationError

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

EXPERIMENTS = ("two-bump", "sod", "lax", "double-rarefaction", "convergence", "calibrate", "train-hom", "train-nonhom")
RIEMANN = ("sod", "lax", "double-rarefaction")
ESTIMATOR_MODES = ("fixed", "optimal_K", "optimal_KL")
MULTI_MODES = ("direct", "orthogonal")
HOM_CONTROLS = ("bgk", "bgk-calibrated", "maxwellian", "surrogate", "surrogate-calibrated")
RIEMANN_CONTROLS = ("bgk", "bgk-calibrated", "euler", "surrogate")
OUTPUT_ROOT_ENV = "KINUQ_OUTPUT_ROOT"


@dataclass(frozen=True)
class PhysicsConfig:
    eps: float = 1.0
    mu: float | str = 1.0  # a number or "calibrated"
    t_final: float | None = None  # problem default when omitted
    n_times: int = 11

    def check(self):
        if not self.eps > 0:
            raise ConfigurationError("physics.eps must be positive")
        if isinstance(self.mu, str):
            if self.mu != "calibrated":
                raise ConfigurationError(f"physics.mu must be a positive number or 'calibrated', got {self.mu!r}")
        elif not self.mu > 0:
            raise ConfigurationError("physics.mu must be positive")
        if self.t_final is not None and not self.t_final > 0:
            raise ConfigurationError("physics.t_final must be positive")
        if self.n_times < 2:
            raise ConfigurationError("physics.n_times must be >= 2")


@dataclass(frozen=True)
class ProblemConfig:
    rho0: float = 0.75
    sigma: float = 0.5
    d: float = 1.5
    amplitude: float = 0.25  # Sod temperature perturbation
    riemann: str = "sod"  # problem used by train-nonhom

    def check(self):
        if min(self.rho0, self.sigma) <= 0:
            raise ConfigurationError("problem.rho0 and problem.sigma must be positive")
        if self.riemann not in RIEMANN:
            raise ConfigurationError(f"problem.riemann must be one of {RIEMANN}")


@dataclass(frozen=True)
class DiscretizationConfig:
    velocity_extent: float | None = None  # problem default when omitted
    n_velocity: int = 64
    n_cells: int = 100
    cfl: float = 0.5
    dt: float | None = None  # homogeneous Boltzmann step, 0.01 eps when omitted
    n_angle: int = 16

    def check(self):
        if self.velocity_extent is not None and not self.velocity_extent > 0:
            raise ConfigurationError("discretization.velocity_extent must be positive")
        if self.n_velocity < 4 or self.n_velocity % 2:
            raise ConfigurationError("discretization.n_velocity must be even and >= 4")
        if self.n_cells < 4:
            raise ConfigurationError("discretization.n_cells must be >= 4")
        if not 0 < self.cfl <= 0.9:
            raise ConfigurationError("discretization.cfl must lie in (0, 0.9]")
        if self.dt is not None and not self.dt > 0:
            raise ConfigurationError("discretization.dt must be positive")


@dataclass(frozen=True)
class UQConfig:
    K: int = 50
    L: int = 1000
    estimator: str = "optimal_K"
    multi_estimator: str = "direct"
    controls: tuple[str, ...] = ("bgk",)
    gl_cells: int = 8
    gl_nodes: int = 5
    batch_size: int = 64
    replications: int = 1
    counts: tuple[int, ...] = (100, 1000, 10000)

    def check(self):
        if self.K < 2 or self.L < 2:
            raise ConfigurationError("uq.K and uq.L must be >= 2")
        if self.estimator not in ESTIMATOR_MODES:
            raise ConfigurationError(f"uq.estimator must be one of {ESTIMATOR_MODES}")
        if self.multi_estimator not in MULTI_MODES:
            raise ConfigurationError(f"uq.multi_estimator must be one of {MULTI_MODES}")
        if len(set(self.controls)) != len(self.controls):
            raise ConfigurationError("uq.controls contains duplicates")
        if self.gl_cells < 1 or self.gl_nodes < 2:
            raise ConfigurationError("uq.gl_cells >= 1 and uq.gl_nodes >= 2 required")
        if self.batch_size < 1 or self.replications < 1:
            raise ConfigurationError("uq.batch_size and uq.replications must be positive")
        if not self.counts or min(self.counts) < 2:
            raise ConfigurationError("uq.counts must list sample sizes >= 2")


@dataclass(frozen=True)
class CalibrationConfig:
    bracket: tuple[float, float] = (0.02, 2.0)
    rtol: float = 1e-3
    n_checkpoints: int = 50
    horizon: float = 2.0
    z: tuple[tuple[float, ...], ...] = ((0.0, 0.0),)
    sweep: tuple[float, ...] = ()
    mu: float | None = None  # skip the search and use this value

    def check(self):
        if len(self.bracket) != 2 or not 0 < self.bracket[0] < self.bracket[1]:
            raise ConfigurationError("calibration.bracket must satisfy 0 < lo < hi")
        if not 0 < self.rtol < 1 or self.n_checkpoints < 2 or not self.horizon > 0:
            raise ConfigurationError("invalid calibration tolerance, checkpoint count or horizon")
        if not self.z:
            raise ConfigurationError("calibration.z must list at least one random input")
        if any(m <= 0 for m in self.sweep) or (self.mu is not None and not self.mu > 0):
            raise ConfigurationError("calibration mu values must be positive")


@dataclass(frozen=True)
class SurrogateConfig:
    hidden: tuple[int, ...] = (64, 64, 64, 64)
    hidden_macro: tuple[int, ...] = (64, 64, 64, 64)
    steps: int = 20000
    learning_rate: float = 1e-3
    final_learning_rate: float | None = 1e-5
    log_every: int = 500
    weights: tuple[float, ...] = ()  # problem default when empty
    train_z: tuple[float, ...] = (0.3, 0.7)
    n_data: int = 256
    data_source: str = "bgk"  # homogeneous supervision: exact "bgk" or spectral "boltzmann"
    n_train_z: int = 8  # nonhomogeneous data trajectories
    n_snapshots: int = 4
    checkpoint: str | None = None
    checkpoint_calibrated: str | None = None
    n_test: int = 10

    def check(self):
        if not self.hidden or min(self.hidden) < 1 or not self.hidden_macro or min(self.hidden_macro) < 1:
            raise ConfigurationError("surrogate hidden layers must be positive widths")
        if self.steps < 0 or not self.learning_rate > 0 or self.log_every < 1:
            raise ConfigurationError("invalid surrogate optimizer settings")
        if self.weights and min(self.weights) < 0:
            raise ConfigurationError("surrogate.weights must be nonnegative")
        if self.n_data < 0 or self.n_train_z < 1 or self.n_snapshots < 1 or self.n_test < 1:
            raise ConfigurationError("invalid surrogate data counts")
        if self.data_source not in ("bgk", "boltzmann"):
            raise ConfigurationError("surrogate.data_source must be 'bgk' or 'boltzmann'")


_SECTIONS = {
    "physics": PhysicsConfig,
    "problem": ProblemConfig,
    "discretization": DiscretizationConfig,
    "uq": UQConfig,
    "calibration": CalibrationConfig,
    "surrogate": SurrogateConfig,
}


def _tupleize(value):
    if isinstance(value, list):
        return tuple(_tupleize(v) for v in value)
    return value


def _build(cls, table: dict, name: str):
    if not isinstance(table, dict):
        raise ConfigurationError(f"[{name}] must be a table")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(table) - known)
    if unknown:
        raise ConfigurationError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    try:
        obj = cls(**{k: _tupleize(v) for k, v in table.items()})
        obj.check()
    except TypeError as exc:
        raise ConfigurationError(f"[{name}]: {exc}") from exc
    return obj


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    seed: int
    output_dir: str
    physics: PhysicsConfig = field(default_factory=PhysicsConfig)
    problem: ProblemConfig = field(default_factory=ProblemConfig)
    discretization: DiscretizationConfig = field(default_factory=DiscretizationConfig)
    uq: UQConfig = field(default_factory=UQConfig)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    source: str = field(default="", repr=False, compare=False)

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigurationError(f"experiment must be one of {EXPERIMENTS}, got {self.experiment!r}")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise ConfigurationError("seed must be an unsigned 64-bit integer")
        allowed = RIEMANN_CONTROLS if self.experiment in RIEMANN else HOM_CONTROLS
        bad = [c for c in self.uq.controls if c not in allowed]
        if bad and self.experiment in ("two-bump",) + RIEMANN:
            raise ConfigurationError(f"control(s) {bad} not available for {self.experiment}; choose from {allowed}")

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.source.encode()).hexdigest()

    def resolve(self, path: str) -> Path:
        """Relative paths (outputs and checkpoints) live under the output root."""
        p = Path(path)
        return p if p.is_absolute() else output_root() / p

    def output_path(self) -> Path:
        return self.resolve(self.output_dir)

    def needs_mu_star(self) -> bool:
        return self.physics.mu == "calibrated" or any(c.endswith("-calibrated") for c in self.uq.controls)


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def parse_config(text: str) -> ExperimentConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"malformed config: {exc}") from exc
    head = raw.pop("experiment", None)
    if not isinstance(head, dict):
        raise ConfigurationError("missing [experiment] table with id, seed and output_dir")
    unknown = sorted(set(head) - {"id", "seed", "output_dir"})
    if unknown:
        raise ConfigurationError(f"unknown key(s) in [experiment]: {', '.join(unknown)}")
    for key in ("id", "seed", "output_dir"):
        if key not in head:
            raise ConfigurationError(f"[experiment] is missing {key!r}")
    extra = sorted(set(raw) - set(_SECTIONS))
    if extra:
        raise ConfigurationError(f"unknown section(s): {', '.join(extra)}")
    sections = {name: _build(cls, raw.get(name, {}), name) for name, cls in _SECTIONS.items()}
    return ExperimentConfig(
        head["id"], head["seed"], str(head["output_dir"]), **sections, source=text)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
