"""Experiment orchestration: estimators against Gauss-Lobatto references, calibration, training and convergence.

Every runner writes CSV tables with a versioned schema line, a verbatim copy
of the config and a manifest holding the config hash, seed, package versions,
wall times and output-file hashes. Outputs depend only on ``(config, seed)``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import platform
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .calibration import CalibrationProblem, calibrate_mu, entropy_discrepancy
from .collision import RelaxationRate, build_spectral_plan
from .config import RIEMANN, ExperimentConfig
from .errors import ConfigurationError, InvalidInputError
from .grid import MacroState, SpatialGrid, VelocityGrid, entropy, local_maxwellian
from .net import LossHistory, Schedule
from .problems import RIEMANN_PROBLEMS, RiemannProblem, TwoBump, sod
from .sapnn import (
    HomSapnnConfig,
    HomTrainingData,
    NonhomSapnnConfig,
    NonhomTrainingData,
    hom_metadata,
    hom_moment_loss,
    load_hom_surrogate,
    load_nonhom_surrogate,
    save_nonhom_surrogate,
    save_surrogate,
    train_hom,
    train_nonhom,
)
from .solvers import (
    KineticField,
    solve_bgk_1d,
    solve_boltzmann_1d,
    solve_euler_1d,
    solve_hom_bgk,
    solve_hom_boltzmann,
)
from .uq import (
    draw_samples,
    evaluate,
    fit_rate,
    gauss_lobatto_reference,
    l1_expectation_error,
    l1_profile_error,
    mc_estimate,
    mmscv_estimate,
    mscv_estimate,
    streaming_mean,
)

log = logging.getLogger("kinuq")

SCHEMA_VERSION = 1
SCHEMAS = {
    "error_curves": ("t", "method", "quantity", "l1_error"),
    "profiles": ("coordinate", "quantity", "method", "value"),
    "entropy": ("t", "model", "H"),
    "calibration": ("mu", "discrepancy"),
    "convergence": ("L", "method", "replication", "l1_error"),
    "convergence_band": ("L", "method", "mean", "band_low", "band_high"),
    "rates": ("method", "slope", "band_low", "band_high"),
    "loss_history": None,  # columns depend on the loss terms
}
QUANTITIES = ("rho", "momentum", "energy", "temperature")
TEST_OFFSET = 2**40  # sample IDs reserved for held-out surrogate tests
BAND = (0.1, 0.9)


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


@dataclass
class ResultTable:
    """CSV rows in insertion order, preceded by ``# schema: <name>/<version>``."""

    name: str
    columns: tuple[str, ...]
    rows: list = field(default_factory=list)

    def add(self, *row) -> None:
        if len(row) != len(self.columns):
            raise InvalidInputError(f"{self.name}: expected {len(self.columns)} fields, got {len(row)}")
        self.rows.append(row)

    def render(self) -> str:
        lines = [f"# schema: {self.name}/{SCHEMA_VERSION}", ",".join(self.columns)]
        lines += [",".join(_fmt(v) for v in row) for row in self.rows]
        return "\n".join(lines) + "\n"

    def write(self, directory: Path) -> Path:
        path = directory / f"{self.name}.csv"
        path.write_text(self.render())
        return path


def table(name: str) -> ResultTable:
    return ResultTable(name, SCHEMAS[name])


def history_table(history: LossHistory) -> ResultTable:
    names = sorted({k for p in history.parts for k in p})
    tab = ResultTable("loss_history", ("step", "total", *names))
    for s, t, p in zip(history.steps, history.totals, history.parts):
        tab.add(s, float(t), *(float(p.get(k, math.nan)) for k in names))
    return tab


@dataclass
class RunContext:
    config: ExperimentConfig
    out: Path
    jobs: int = 1
    tables: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    _mu_star: float | None = None

    @contextmanager
    def timed(self, stage: str):
        t0 = time.perf_counter()
        log.info("%s ...", stage)
        yield
        self.timings[stage] = round(time.perf_counter() - t0, 3)
        log.info("%s done in %.1fs", stage, self.timings[stage])

    def add_table(self, tab: ResultTable) -> ResultTable:
        self.tables[tab.name] = tab
        return tab


# ------------------------------------------------------------------- helpers


def two_bump(cfg: ExperimentConfig) -> TwoBump:
    p = cfg.problem
    extent = cfg.discretization.velocity_extent or TwoBump.extent
    return TwoBump(p.rho0, p.sigma, p.d, extent)


def riemann_problem(cfg: ExperimentConfig, name: str) -> RiemannProblem:
    return sod(cfg.problem.amplitude) if name == "sod" else RIEMANN_PROBLEMS[name]()


def velocity_grid(cfg: ExperimentConfig, default_extent: float) -> VelocityGrid:
    return VelocityGrid(cfg.discretization.velocity_extent or default_extent, cfg.discretization.n_velocity)


def _times(cfg: ExperimentConfig, default_final: float) -> np.ndarray:
    return np.linspace(0.0, cfg.physics.t_final or default_final, cfg.physics.n_times)


def mu_star(ctx: RunContext) -> float:
    """The entropy-calibrated relaxation frequency (configured value or a fresh calibration)."""
    if ctx._mu_star is None:
        given = ctx.config.calibration.mu
        ctx._mu_star = float(given) if given is not None else run_calibration(ctx, primary=False).mu
        ctx.summary["mu_star"] = ctx._mu_star
    return ctx._mu_star


def base_mu(ctx: RunContext) -> float:
    mu = ctx.config.physics.mu
    return mu_star(ctx) if mu == "calibrated" else float(mu)


def check_prerequisites(cfg: ExperimentConfig) -> None:
    """Fail before any compute when referenced checkpoints are missing."""
    s = cfg.surrogate
    wanted = []
    if cfg.experiment in ("two-bump",) + RIEMANN:
        if "surrogate" in cfg.uq.controls:
            wanted.append(("surrogate.checkpoint", s.checkpoint))
        if "surrogate-calibrated" in cfg.uq.controls:
            wanted.append(("surrogate.checkpoint_calibrated", s.checkpoint_calibrated))
    for key, path in wanted:
        if not path:
            raise ConfigurationError(f"control requires {key}")
        if not cfg.resolve(path).is_file():
            raise ConfigurationError(f"{key} not found: {cfg.resolve(path)}")
    if cfg.experiment == "convergence" and any(c != "maxwellian" for c in cfg.uq.controls):
        raise ConfigurationError("the convergence study supports only the 'maxwellian' control")


def _by_time(states: np.ndarray) -> np.ndarray:
    """Move a leading time axis behind the sample axis."""
    return np.moveaxis(states, 0, 1)


# --------------------------------------------------------------- calibration


def run_calibration(ctx: RunContext, primary: bool = True):
    """Entropy calibration of ``mu``; as a sub-stage of another run only the discrepancy table is kept."""
    cfg = ctx.config
    cal = cfg.calibration
    prob = two_bump(cfg)
    grid = velocity_grid(cfg, prob.extent)
    plan = build_spectral_plan(grid, cfg.discretization.n_angle)
    f0 = prob.initial(np.asarray(cal.z, dtype=float), grid)
    with ctx.timed("calibration reference"):
        problem = CalibrationProblem.from_boltzmann(
            f0, cfg.physics.eps, cal.horizon, plan, cal.n_checkpoints, cfg.discretization.dt
        )
    with ctx.timed("calibration search"):
        result = calibrate_mu(problem, cal.bracket, cal.rtol)
    tab = ctx.add_table(table("calibration"))
    points = {m: j for m, j in result.probes}
    points[result.mu] = result.discrepancy
    for m in cal.sweep:
        points[float(m)] = entropy_discrepancy(float(m), problem)
    for m in sorted(points):
        tab.add(m, points[m])
    ctx.summary.update(
        mu_star=result.mu,
        mu_star_inverse=result.inverse,
        discrepancy=result.discrepancy,
        calibration_evaluations=result.n_evaluations,
    )
    ctx._mu_star = result.mu
    if not primary:
        return result
    ent = ctx.add_table(table("entropy"))
    curves = [("boltzmann", problem.reference), ("bgk(mu=1)", problem.bgk_entropy(1.0))]
    curves.append((f"bgk(mu*={result.mu:.6g})", problem.bgk_entropy(result.mu)))
    for name, H in curves:
        for t, h in zip(problem.times, H.mean(axis=0)):
            ent.add(t, name, h)
    return result


# ------------------------------------------------------------------ two-bump


def hom_controls(ctx: RunContext, prob: TwoBump, grid: VelocityGrid, times: np.ndarray) -> dict:
    cfg = ctx.config
    eps = cfg.physics.eps
    out = {}
    for name in cfg.uq.controls:
        if name in ("bgk", "bgk-calibrated"):
            rate = RelaxationRate(base_mu(ctx) if name == "bgk" else mu_star(ctx), eps)
            out[name] = lambda z, r=rate: _by_time(solve_hom_bgk(prob.initial(z, grid), grid, r, times))
        elif name == "maxwellian":
            out[name] = lambda z: np.repeat(local_maxwellian(prob.initial(z, grid), grid)[:, None], times.size, 1)
        else:
            path = cfg.surrogate.checkpoint if name == "surrogate" else cfg.surrogate.checkpoint_calibrated
            model, sgrid = load_hom_surrogate(cfg.resolve(path))
            if sgrid != grid:
                raise ConfigurationError(f"{name} checkpoint was trained on {sgrid}, experiment uses {grid}")
            out[name] = lambda z, m=model: _by_time(m.predict(prob.initial(z, grid), grid, times))
    return out


def _estimates(cfg: ExperimentConfig, hf, lf_k: dict, lf_ref: dict) -> dict:
    uq = cfg.uq
    est = {"MC": mc_estimate(hf).mean}
    for name in lf_k:
        est[f"MSCV({name})"] = mscv_estimate(hf, lf_k[name], lf_ref[name], uq.estimator, n_ref=uq.L).mean
    if len(lf_k) >= 2:
        names = list(lf_k)
        est[f"MMSCV({'+'.join(names)})"] = mmscv_estimate(
            hf, [lf_k[n] for n in names], [lf_ref[n] for n in names], uq.multi_estimator
        ).mean
    return est


def _sample_sets(cfg: ExperimentConfig, spec):
    """HF samples ``0..K-1`` and independent control-reference samples ``K..K+L-1``."""
    return draw_samples(spec, cfg.uq.K, cfg.seed), draw_samples(spec, cfg.uq.L, cfg.seed, start=cfg.uq.K)


def run_two_bump(ctx: RunContext) -> None:
    cfg = ctx.config
    prob = two_bump(cfg)
    grid = velocity_grid(cfg, prob.extent)
    plan = build_spectral_plan(grid, cfg.discretization.n_angle)
    times = _times(cfg, 2.0)
    eps, dt, uq = cfg.physics.eps, cfg.discretization.dt, cfg.uq

    def hf_eval(z):
        traj = solve_hom_boltzmann(prob.initial(z, grid), eps, times[-1], plan, dt=dt, times=times)
        return _by_time(traj.states)

    controls = hom_controls(ctx, prob, grid, times)
    spec = prob.random_input
    samples, ref_samples = _sample_sets(cfg, spec)
    with ctx.timed("high-fidelity samples"):
        hf = evaluate(samples, hf_eval, uq.batch_size, ctx.jobs)
    with ctx.timed("control samples"):
        lf_k = {n: evaluate(samples, ev, uq.batch_size, ctx.jobs) for n, ev in controls.items()}
        lf_ref = {n: streaming_mean(ref_samples, ev, uq.batch_size, ctx.jobs) for n, ev in controls.items()}
    with ctx.timed("Gauss-Lobatto reference"):
        reference = gauss_lobatto_reference(spec, hf_eval, uq.gl_cells, uq.gl_nodes, uq.batch_size)
    estimates = _estimates(cfg, hf, lf_k, lf_ref)

    err = ctx.add_table(table("error_curves"))
    for k, t in enumerate(times):
        for method, e in estimates.items():
            err.add(t, method, "f", l1_expectation_error(e[k], reference[k], grid))
    prof = ctx.add_table(table("profiles"))
    row = grid.n_per_dim // 2  # v_y closest to zero from above
    for method, e in {"reference": reference, **estimates}.items():
        for j, v in enumerate(e[-1, :, row]):
            prof.add(j, "f(v_x, v_y=0)", method, v)
    ent = ctx.add_table(table("entropy"))
    curves = {"boltzmann": hf.values, **{n: r.values for n, r in lf_k.items()}}
    for name, vals in curves.items():
        H = entropy(np.maximum(vals, 0.0), grid).mean(axis=0)
        for t, h in zip(times, H):
            ent.add(t, name, h)
    ctx.summary["final_errors"] = {m: float(r[-1]) for m, r in _final(err).items()}


def _final(err: ResultTable) -> dict:
    last = max(r[0] for r in err.rows)
    out = {}
    for t, method, quantity, value in err.rows:
        if t == last:
            out[f"{method}:{quantity}"] = [value]
    return out


# ------------------------------------------------------------------- Riemann


def _chain(init, advance, times: np.ndarray, read) -> np.ndarray:
    """Advance ``init`` through ``times`` and stack ``read(field)`` with the sample axis first."""
    field_, out = init, [read(init)]
    for t0, t1 in zip(times[:-1], times[1:]):
        field_ = advance(field_, t1 - t0)
        out.append(read(field_))
    return np.stack(out, axis=1)


def _quantities(U: np.ndarray) -> np.ndarray:
    """Per-sample ``(rho, rho u_x, E, T)`` from conserved vectors; ``T`` is formed before averaging."""
    rho = U[..., 0]
    kinetic = 0.5 * (U[..., 1] ** 2 + U[..., 2] ** 2) / rho
    temp = (U[..., 3] - kinetic) / rho  # E = rho |u|^2 / 2 + rho T for two velocity dimensions
    return np.stack([rho, U[..., 1], U[..., 3], temp], axis=-1)


def _state_conserved(state: MacroState) -> np.ndarray:
    return np.concatenate([state.rho[..., None], state.momentum, state.energy[..., None]], axis=-1)


def _kinetic_quantities(field_: KineticField) -> np.ndarray:
    return _quantities(field_.conserved())


def riemann_controls(ctx: RunContext, prob: RiemannProblem, space, grid, times) -> dict:
    cfg = ctx.config
    eps, cfl = cfg.physics.eps, cfg.discretization.cfl
    out = {}
    for name in cfg.uq.controls:
        if name in ("bgk", "bgk-calibrated"):
            rate = RelaxationRate(base_mu(ctx) if name == "bgk" else mu_star(ctx), eps)
            out[name] = lambda z, r=rate: _chain(
                prob.kinetic(z, space, grid), lambda f, h: solve_bgk_1d(f, r, h, cfl), times, _kinetic_quantities
            )
        elif name == "euler":
            out[name] = lambda z: _chain(
                prob.euler(z, space), lambda f, h: solve_euler_1d(f, h, cfl), times, lambda f: _quantities(f.U)
            )
        else:
            model = load_nonhom_surrogate(cfg.resolve(cfg.surrogate.checkpoint))
            if model.config.grid != grid:
                raise ConfigurationError("nonhomogeneous surrogate was trained on a different velocity grid")

            def ev(z, m=model):
                return np.stack([_quantities(_state_conserved(m.evaluate(z, t, space)[1])) for t in times], axis=1)

            out[name] = ev
    return out


def run_riemann(ctx: RunContext) -> None:
    cfg = ctx.config
    prob = riemann_problem(cfg, cfg.experiment)
    grid = velocity_grid(cfg, prob.extent)
    space = SpatialGrid(cfg.discretization.n_cells)
    plan = build_spectral_plan(grid, cfg.discretization.n_angle)
    times = _times(cfg, prob.t_final)
    eps, cfl, uq = cfg.physics.eps, cfg.discretization.cfl, cfg.uq

    def hf_eval(z):
        return _chain(
            prob.kinetic(z, space, grid),
            lambda f, h: solve_boltzmann_1d(f, eps, h, plan, cfl),
            times,
            _kinetic_quantities,
        )

    controls = riemann_controls(ctx, prob, space, grid, times)
    samples, ref_samples = _sample_sets(cfg, prob.spec)
    with ctx.timed("high-fidelity samples"):
        hf = evaluate(samples, hf_eval, uq.batch_size, ctx.jobs)
    with ctx.timed("control samples"):
        lf_k = {n: evaluate(samples, ev, uq.batch_size, ctx.jobs) for n, ev in controls.items()}
        lf_ref = {n: streaming_mean(ref_samples, ev, uq.batch_size, ctx.jobs) for n, ev in controls.items()}
    with ctx.timed("Gauss-Lobatto reference"):
        reference = gauss_lobatto_reference(prob.spec, hf_eval, uq.gl_cells, uq.gl_nodes, uq.batch_size)
    estimates = _estimates(cfg, hf, lf_k, lf_ref)

    err = ctx.add_table(table("error_curves"))
    for k, t in enumerate(times):
        for method, e in estimates.items():
            errs = l1_profile_error(np.moveaxis(e[k], -1, 0), np.moveaxis(reference[k], -1, 0), space.dx)
            for q, e_q in zip(QUANTITIES, errs):
                err.add(t, method, q, e_q)
    prof = ctx.add_table(table("profiles"))
    for method, e in {"reference": reference, **estimates}.items():
        for i, q in enumerate(QUANTITIES):
            for x, v in zip(space.centers, e[-1, :, i]):
                prof.add(x, q, method, v)
    ctx.summary["final_errors"] = {m: float(r[-1]) for m, r in _final(err).items()}


# --------------------------------------------------------------- convergence


def _cv_moments():
    return {"n": 0, "a": 0.0, "aa": 0.0, "f": 0.0, "ff": 0.0, "af": 0.0}


def convergence_study(ctx: RunContext) -> None:
    """Error of MC and single-control estimators against sample count, replicated.

    The high-fidelity model is the exact homogeneous BGK solution so only the
    sampling error is measured; control means come from the Gauss-Lobatto rule.
    """
    cfg = ctx.config
    prob = two_bump(cfg)
    grid = velocity_grid(cfg, prob.extent)
    t_final = cfg.physics.t_final or 2.0
    rate = RelaxationRate(base_mu(ctx), cfg.physics.eps)
    uq = cfg.uq
    counts = sorted(set(int(c) for c in uq.counts))
    spec = prob.random_input

    def hf_and_controls(z):
        f0 = prob.initial(z, grid)
        return solve_hom_bgk(f0, grid, rate, t_final), local_maxwellian(f0, grid)

    with ctx.timed("Gauss-Lobatto reference"):
        ref = gauss_lobatto_reference(spec, lambda z: np.stack(hf_and_controls(z), 1), uq.gl_cells, uq.gl_nodes)
    ref_hf, ref_m = ref[0], ref[1]
    methods = ["MC"] + (["MSCV(maxwellian)"] if "maxwellian" in uq.controls else [])
    raw = ctx.add_table(table("convergence"))
    errors = {m: np.zeros((uq.replications, len(counts))) for m in methods}
    with ctx.timed("replications"):
        for r in range(uq.replications):
            samples = draw_samples(spec, counts[-1], cfg.seed + r)
            acc = _cv_moments()
            edges = sorted(set(range(0, counts[-1], uq.batch_size)) | set(counts) | {0})
            for lo, hi in zip(edges[:-1], edges[1:]):
                a, f = hf_and_controls(samples.z_values[lo:hi])
                acc["n"] += hi - lo
                acc["a"] = acc["a"] + a.sum(0)
                acc["aa"] = acc["aa"] + (a * a).sum(0)
                acc["f"] = acc["f"] + f.sum(0)
                acc["ff"] = acc["ff"] + (f * f).sum(0)
                acc["af"] = acc["af"] + (a * f).sum(0)
                if hi in counts:
                    j = counts.index(hi)
                    n = acc["n"]
                    ma, mf = acc["a"] / n, acc["f"] / n
                    errors["MC"][r, j] = l1_expectation_error(ma, ref_hf, grid)
                    if len(methods) > 1:
                        cov = (acc["af"] - n * ma * mf) / (n - 1)
                        var = (acc["ff"] - n * mf * mf) / (n - 1)
                        lam = np.where(var > 0, cov / np.where(var > 0, var, 1.0), 0.0)
                        errors[methods[1]][r, j] = l1_expectation_error(ma - lam * (mf - ref_m), ref_hf, grid)
            for m in methods:
                for j, n in enumerate(counts):
                    raw.add(n, m, r, errors[m][r, j])
    band = ctx.add_table(table("convergence_band"))
    rates = ctx.add_table(table("rates"))
    for m in methods:
        e = errors[m]
        for j, n in enumerate(counts):
            lo, hi = np.quantile(e[:, j], BAND)
            band.add(n, m, float(e[:, j].mean()), float(lo), float(hi))
        if np.all(e > 0) and len(counts) > 1:
            slope = fit_rate(counts, e.mean(axis=0))
            per_rep = [fit_rate(counts, row) for row in e]
            lo, hi = np.quantile(per_rep, BAND)
        else:
            slope = lo = hi = math.nan
        rates.add(m, slope, float(lo), float(hi))
        ctx.summary.setdefault("slopes", {})[m] = slope


# ------------------------------------------------------------------ training


def _hom_weights(cfg: ExperimentConfig) -> dict:
    w = cfg.surrogate.weights or (1.0, 1.0, 10.0, 10.0)
    if len(w) != 4:
        raise ConfigurationError("homogeneous surrogate.weights are (moment, residual, boundary, data)")
    return dict(zip(("w_moment", "w_residual", "w_boundary", "w_data"), map(float, w)))


def _schedule(cfg: ExperimentConfig) -> Schedule:
    s = cfg.surrogate
    return Schedule(s.steps, s.learning_rate, s.final_learning_rate, s.log_every, cfg.seed % 2**32)


def run_train_hom(ctx: RunContext) -> None:
    cfg = ctx.config
    prob = two_bump(cfg)
    grid = velocity_grid(cfg, prob.extent)
    t_final = cfg.physics.t_final or 2.0
    rate = RelaxationRate(base_mu(ctx), cfg.physics.eps)
    s = cfg.surrogate
    hcfg = HomSapnnConfig(rate=rate, t_final=t_final, hidden=tuple(s.hidden), schedule=_schedule(cfg), **_hom_weights(cfg))
    f0 = prob.initial([s.train_z], grid)[0]
    if s.n_data:
        window = np.linspace(0.0, hcfg.data_fraction * t_final, 9)
        if s.data_source == "boltzmann":
            plan = build_spectral_plan(grid, cfg.discretization.n_angle)
            states = solve_hom_boltzmann(
                f0, cfg.physics.eps, window[-1], plan, dt=cfg.discretization.dt, times=window
            ).states
        else:
            states = solve_hom_bgk(f0, grid, rate, window)
        data = HomTrainingData.from_trajectory(grid, f0, window, states, s.n_data, seed=cfg.seed % 2**32)
    else:
        data = HomTrainingData(grid, f0)
    with ctx.timed("training"):
        model, history = train_hom(hcfg, data)
    save_surrogate(ctx.out / "surrogate.kuq", model.params, "hom", hom_metadata(model, grid))
    ctx.add_table(history_table(history))

    times = _times(cfg, t_final)
    z = draw_samples(prob.random_input, s.n_test, cfg.seed, start=TEST_OFFSET).z_values
    F0 = prob.initial(z, grid)
    pred = model.predict(F0, grid, times)
    exact = solve_hom_bgk(F0, grid, rate, times)
    rel = np.abs(pred - exact).sum(axis=(-2, -1)) / np.abs(exact).sum(axis=(-2, -1))
    err = ctx.add_table(table("error_curves"))
    for k, t in enumerate(times):
        err.add(t, "surrogate", "max_relative_f", float(rel[k].max()))
    prof = ctx.add_table(table("profiles"))
    row = grid.n_per_dim // 2
    for method, vals in (("bgk", exact[-1, 0, :, row]), ("surrogate", pred[-1, 0, :, row])):
        for j, v in enumerate(vals):
            prof.add(j, "f(v_x, v_y=0)", method, v)
    moment = hom_moment_loss(model.gfield, f0, grid, times) / times.size
    ctx.summary.update(
        max_relative_l1_final=float(rel[-1].max()),
        min_prediction=float(pred.min()),
        moment_loss=float(moment),
        mu=rate.mu,
    )


def riemann_initial_state(prob: RiemannProblem):
    def state(x, z):
        left, right = prob.states(np.atleast_2d(z))
        w = np.where((np.asarray(x) <= 0.5)[:, None], left, right)
        return MacroState.of(w[:, 0], w[:, 1:3], w[:, 3])

    return state


def run_train_nonhom(ctx: RunContext) -> None:
    cfg = ctx.config
    prob = riemann_problem(cfg, cfg.problem.riemann)
    grid = velocity_grid(cfg, prob.extent)
    space = SpatialGrid(cfg.discretization.n_cells)
    t_final = cfg.physics.t_final or prob.t_final
    rate = RelaxationRate(base_mu(ctx), cfg.physics.eps)
    s = cfg.surrogate
    w = s.weights or (1.0, 1.0, 1.0, 10.0, 10.0)
    if len(w) != 5:
        raise ConfigurationError("nonhomogeneous surrogate.weights are (moment, residual, moment_system, boundary, data)")
    ncfg = NonhomSapnnConfig(
        grid=grid,
        spec=prob.spec,
        rate=rate,
        t_final=t_final,
        hidden_g=tuple(s.hidden),
        hidden_macro=tuple(s.hidden_macro),
        w_moment=w[0],
        w_residual=w[1],
        w_moment_system=w[2],
        w_boundary=w[3],
        w_data=w[4],
        schedule=_schedule(cfg),
    )
    z = draw_samples(prob.spec, s.n_train_z, cfg.seed).z_values
    snaps = np.linspace(0.0, ncfg.data_fraction * t_final, s.n_snapshots)
    with ctx.timed("training data"):
        fs = _chain(
            prob.kinetic(z, space, grid), lambda f, h: solve_bgk_1d(f, rate, h, cfg.discretization.cfl), snaps, lambda f: f.values
        )  # (nz, nt, nx, n, n)
    nz, nt, nx = fs.shape[:3]
    X = np.stack(np.meshgrid(np.arange(nz), snaps, space.centers, indexing="ij"), -1).reshape(-1, 3)
    points = np.concatenate([X[:, 2:3], X[:, 1:2], z[X[:, 0].astype(int)]], axis=1)
    f_rows = fs.reshape(nz * nt * nx, -1)
    U = np.stack([np.einsum("pl,l->p", f_rows, phi.ravel()) for phi in _invariants(grid)], axis=-1)
    data = NonhomTrainingData(points, f_rows, U, riemann_initial_state(prob))
    with ctx.timed("training"):
        model, history = train_nonhom(ncfg, data)
    save_nonhom_surrogate(ctx.out / "surrogate.kuq", model)
    ctx.add_table(history_table(history))

    times = _times(cfg, t_final)

    def bgk_rho(zz):
        return _chain(
            prob.kinetic(zz, space, grid),
            lambda f, h: solve_bgk_1d(f, rate, h, cfg.discretization.cfl),
            times,
            lambda f: f.macro().rho,
        )

    def nn_rho(zz):
        return np.stack([model.evaluate(zz, t, space)[1].rho for t in times], axis=1)

    with ctx.timed("evaluation"):
        ref = gauss_lobatto_reference(prob.spec, bgk_rho, cfg.uq.gl_cells, cfg.uq.gl_nodes, cfg.uq.batch_size)
        est = gauss_lobatto_reference(prob.spec, nn_rho, cfg.uq.gl_cells, cfg.uq.gl_nodes, cfg.uq.batch_size)
    err = ctx.add_table(table("error_curves"))
    for k, t in enumerate(times):
        err.add(t, "surrogate", "rho", float(l1_profile_error(est[k], ref[k], space.dx)))
    prof = ctx.add_table(table("profiles"))
    for method, vals in (("bgk", ref[-1]), ("surrogate", est[-1])):
        for x, v in zip(space.centers, vals):
            prof.add(x, "rho", method, v)
    ctx.summary["final_rho_error"] = float(err.rows[-1][-1])


def _invariants(grid: VelocityGrid):
    return (
        np.ones(grid.shape) * grid.cell_area,
        grid.vx * grid.cell_area,
        grid.vy * grid.cell_area,
        0.5 * grid.speed_sq * grid.cell_area,
    )


# ------------------------------------------------------------------- driver

RUNNERS = {
    "two-bump": run_two_bump,
    "sod": run_riemann,
    "lax": run_riemann,
    "double-rarefaction": run_riemann,
    "convergence": convergence_study,
    "calibrate": run_calibration,
    "train-hom": run_train_hom,
    "train-nonhom": run_train_nonhom,
}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run_experiment(config: ExperimentConfig, jobs: int = 1, runner=None) -> Path:
    """Run ``config`` (or a specific ``runner``) and write all outputs; returns the output directory."""
    check_prerequisites(config)
    if jobs < 1:
        raise ConfigurationError("jobs must be >= 1")
    out = config.output_path()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(config.source)
    ctx = RunContext(config, out, jobs)
    runner = runner or RUNNERS[config.experiment]
    t0 = time.perf_counter()
    runner(ctx)
    ctx.timings["total"] = round(time.perf_counter() - t0, 3)
    written = [tab.write(out) for tab in ctx.tables.values()]
    files = sorted(written + [p for p in out.glob("surrogate.kuq*")] + [out / "config.toml"])
    manifest = {
        "experiment": config.experiment,
        "runner": runner.__name__,
        "seed": config.seed,
        "config_sha256": config.digest,
        "schema_version": SCHEMA_VERSION,
        "versions": {
            "kinuq": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "wall_times": ctx.timings,
        "files": {p.name: _sha256(p) for p in files},
        "summary": ctx.summary,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=float) + "\n")
    return out

