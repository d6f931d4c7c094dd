"""Random inputs, Monte Carlo and multiscale control-variate estimators, Gauss-Lobatto references.

Realizations of every fidelity are arrays with the sample axis first. When
fidelities are combined the sample IDs must agree (common random numbers).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import CommonRandomNumberError, ConfigurationError, InvalidInputError, SampleEvaluationError
from .grid import VelocityGrid, weighted_norm

VAR_FLOOR = 1e-14
RIDGE = 1e-10
COND_LIMIT = 1e12
_WORDS_PER_BLOCK = 4  # Philox4x64 yields four 64-bit words per counter increment


# ------------------------------------------------------------------- sampling


@dataclass(frozen=True)
class RandomInputSpec:
    """Independent uniform components on the intervals of ``box``."""

    box: tuple[tuple[float, float], ...]
    distribution: str = "uniform"

    def __post_init__(self):
        box = tuple((float(a), float(b)) for a, b in self.box)
        object.__setattr__(self, "box", box)
        if not box:
            raise ConfigurationError("random input needs at least one component")
        if any(not b > a for a, b in box):
            raise ConfigurationError(f"degenerate interval in {box}")
        if self.distribution != "uniform":
            raise ConfigurationError(f"unsupported distribution {self.distribution!r}")

    @property
    def dim(self) -> int:
        return len(self.box)

    @property
    def lower(self) -> np.ndarray:
        return np.array([a for a, _ in self.box])

    @property
    def width(self) -> np.ndarray:
        return np.array([b - a for a, b in self.box])

    def contains(self, z) -> np.ndarray:
        z = np.atleast_2d(z)
        return np.all((z >= self.lower) & (z <= self.lower + self.width), axis=-1)


@dataclass(frozen=True)
class SampleSet:
    z_values: np.ndarray  # (count, dim)
    master_seed: int
    indices: np.ndarray  # stable sample IDs

    def __len__(self) -> int:
        return len(self.indices)

    def subset(self, sl: slice) -> "SampleSet":
        return SampleSet(self.z_values[sl], self.master_seed, self.indices[sl])


def _uniform_words(seed: int, start: int, count: int, dim: int) -> np.ndarray:
    blocks = -(-dim // _WORDS_PER_BLOCK)
    words = blocks * _WORDS_PER_BLOCK
    bitgen = np.random.Philox(key=seed, counter=start * blocks)
    raw = bitgen.random_raw(words * count).reshape(count, words)[:, :dim]
    return (raw >> np.uint64(11)).astype(np.float64) * 2.0**-53


def draw_samples(spec: RandomInputSpec, count: int, seed: int, start: int = 0) -> SampleSet:
    """Counter-based draws: sample ``i`` depends only on ``(seed, i)``."""
    if count < 1:
        raise InvalidInputError("count must be >= 1")
    if not 0 <= seed < 2**64:
        raise InvalidInputError("seed must be a 64-bit unsigned integer")
    u = _uniform_words(int(seed), int(start), int(count), spec.dim)
    z = spec.lower + spec.width * u
    return SampleSet(z, int(seed), np.arange(start, start + count))


# ----------------------------------------------------------------- evaluation


@dataclass(frozen=True)
class Realizations:
    """Evaluator outputs with the sample axis first, tagged by sample ID and seed."""

    values: np.ndarray
    ids: np.ndarray
    seed: int | None = None

    def __len__(self) -> int:
        return len(self.ids)


def _locate_failure(evaluator, z, ids, exc):
    for zi, i in zip(z, ids):
        try:
            evaluator(zi[None, :])
        except Exception as inner:  # noqa: BLE001 - any evaluator failure is reported with its ID
            raise SampleEvaluationError(int(i), inner) from inner
    raise SampleEvaluationError(int(ids[0]), exc) from exc


def evaluate(
    samples: SampleSet,
    evaluator: Callable[[np.ndarray], np.ndarray],
    batch_size: int | None = None,
    jobs: int = 1,
) -> Realizations:
    """Apply a batched ``evaluator`` (``(n, d_z) -> (n, ...)``) to every sample.

    Batches may run on ``jobs`` threads; results are gathered in sample order so
    reductions do not depend on the worker count.
    """
    z, ids = samples.z_values, samples.indices
    n = len(ids)
    size = n if batch_size is None else max(1, int(batch_size))
    chunks = [slice(i, min(n, i + size)) for i in range(0, n, size)]

    def run(sl):
        try:
            out = np.asarray(evaluator(z[sl]), dtype=float)
        except SampleEvaluationError:
            raise
        except Exception as exc:  # noqa: BLE001
            _locate_failure(evaluator, z[sl], ids[sl], exc)
        if out.shape[0] != sl.stop - sl.start:
            raise InvalidInputError("evaluator must return one output per sample")
        if not np.all(np.isfinite(out)):
            bad = np.flatnonzero(~np.all(np.isfinite(out.reshape(out.shape[0], -1)), axis=1))[0]
            raise SampleEvaluationError(int(ids[sl][bad]), FloatingPointError("non-finite output"))
        return out

    if jobs > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(sl) for sl in chunks]
    return Realizations(np.concatenate(parts, axis=0), ids.copy(), samples.master_seed)


def streaming_mean(
    samples: SampleSet,
    evaluator: Callable[[np.ndarray], np.ndarray],
    batch_size: int = 256,
    jobs: int = 1,
) -> np.ndarray:
    """Sample mean of the evaluator without holding all realizations in memory.

    Batch sums are accumulated in sample order, so the result does not depend
    on ``jobs``.
    """
    n = len(samples)
    size = max(1, int(batch_size))
    group = size * max(1, int(jobs))
    total = None
    for start in range(0, n, group):
        vals = evaluate(samples.subset(slice(start, min(n, start + group))), evaluator, size, jobs).values
        for b in range(0, vals.shape[0], size):
            part = vals[b : b + size].sum(axis=0)
            total = part if total is None else total + part
    return total / n


def _values(x) -> np.ndarray:
    return np.asarray(x.values if isinstance(x, Realizations) else x, dtype=float)


def _check_crn(*sets) -> None:
    tagged = [s for s in sets if isinstance(s, Realizations)]
    for other in tagged[1:]:
        same = len(other) == len(tagged[0]) and np.array_equal(other.ids, tagged[0].ids)
        if not same or other.seed != tagged[0].seed:
            raise CommonRandomNumberError("fidelities were evaluated on different samples")
    n = {_values(s).shape[0] for s in sets}
    if len(n) > 1:
        raise CommonRandomNumberError(f"fidelities have different sample counts {sorted(n)}")


# ----------------------------------------------------------------- estimators


@dataclass(frozen=True)
class EstimatorOutput:
    mean: np.ndarray
    variance: np.ndarray  # per-point sample variance of the (controlled) realizations
    lam: np.ndarray | None = None  # (..., ) for one control, (I, ...) for several
    correlation: np.ndarray | None = None
    n_samples: int = 0
    mode: str = "mc"
    notes: dict = field(default_factory=dict)

    @property
    def std_error(self) -> np.ndarray:
        return np.sqrt(self.variance / max(self.n_samples, 1))


def mc_estimate(hf) -> EstimatorOutput:
    """Pointwise sample mean and unbiased sample variance."""
    x = _values(hf)
    if x.shape[0] < 1:
        raise InvalidInputError("need at least one sample")
    var = x.var(axis=0, ddof=1) if x.shape[0] > 1 else np.zeros(x.shape[1:])
    return EstimatorOutput(x.mean(axis=0), var, n_samples=x.shape[0])


def _cov(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    k = a.shape[0]
    return np.sum((a - a.mean(axis=0)) * (b - b.mean(axis=0)), axis=0) / (k - 1)


def optimal_lambda(hf, lf) -> np.ndarray:
    """``Cov_K(hf, lf) / Var_K(lf)`` pointwise, set to 1 where ``Var_K(lf)`` is negligible."""
    _check_crn(hf, lf)
    a, b = _values(hf), _values(lf)
    if a.shape[0] < 2:
        raise InvalidInputError("optimal coefficient needs K >= 2 samples")
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch {a.shape} vs {b.shape}")
    var = _cov(b, b)
    small = var <= VAR_FLOOR * max(float(np.max(var)), 0.0)
    safe = np.where(small, 1.0, var)
    return np.where(small, 1.0, _cov(a, b) / safe)


def _correlation(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    va, vb = _cov(a, a), _cov(b, b)
    denom = np.sqrt(va * vb)
    ok = denom > VAR_FLOOR * max(float(np.max(denom)), 0.0)
    return np.where(ok, np.clip(_cov(a, b) / np.where(ok, denom, 1.0), -1.0, 1.0), np.nan)


def mscv_estimate(hf, lf, lf_mean_ref, mode="optimal_K", n_ref: int | None = None) -> EstimatorOutput:
    """``E_K[hf] - lam (E_K[lf] - E_ref[lf])`` pointwise.

    ``mode`` is a number (fixed coefficient), ``"optimal_K"`` or
    ``"optimal_KL"`` (``L/(K+L)`` times the former, needs ``n_ref = L``).
    """
    _check_crn(hf, lf)
    a, b = _values(hf), _values(lf)
    ref = np.asarray(lf_mean_ref, dtype=float)
    if a.shape != b.shape or ref.shape != a.shape[1:]:
        raise InvalidInputError(f"shape mismatch: hf {a.shape}, lf {b.shape}, ref {ref.shape}")
    k = a.shape[0]
    if isinstance(mode, (int, float)) and not isinstance(mode, bool):
        lam = np.full(a.shape[1:], float(mode))
        label = f"fixed({float(mode):g})"
    elif mode == "optimal_K":
        lam, label = optimal_lambda(a, b), mode
    elif mode == "optimal_KL":
        if not n_ref:
            raise ConfigurationError("optimal_KL needs the reference sample count n_ref")
        lam, label = n_ref / (k + n_ref) * optimal_lambda(a, b), mode
    else:
        raise ConfigurationError(f"unknown coefficient mode {mode!r}")
    controlled = a - lam * b
    mean = a.mean(axis=0) - lam * (b.mean(axis=0) - ref)
    var = controlled.var(axis=0, ddof=1) if k > 1 else np.zeros(a.shape[1:])
    corr = _correlation(a, b) if k > 1 else None
    return EstimatorOutput(mean, var, lam, corr, k, label)


@dataclass(frozen=True)
class GramSchmidtBasis:
    """Centered controls ``g_k = F_k - E_K F_k - sum_{j<k} e_kj g_j`` with diagonal variances ``d``.

    ``transform`` maps centered controls to the basis: ``g = A (F - mean)``.
    """

    g: np.ndarray  # (I, K, ...)
    d: np.ndarray  # (I, ...)
    e: np.ndarray  # (I, I, ...) strictly lower triangular projection coefficients
    transform: np.ndarray  # (I, I, ...) lower triangular with unit diagonal


def gram_schmidt(controls: np.ndarray) -> GramSchmidtBasis:
    """Pointwise empirical Gram-Schmidt over the sample axis of ``controls`` (``(I, K, ...)``)."""
    n_ctrl, k = controls.shape[:2]
    centered = controls - controls.mean(axis=1, keepdims=True)
    pts = controls.shape[2:]
    g = np.empty_like(centered)
    d = np.empty((n_ctrl,) + pts)
    e = np.zeros((n_ctrl, n_ctrl) + pts)
    A = np.zeros((n_ctrl, n_ctrl) + pts)
    scale = max(float(np.max(np.sum(centered**2, axis=1) / (k - 1))), 0.0)
    for i in range(n_ctrl):
        gi = centered[i].copy()
        A[i, i] = 1.0
        for j in range(i):
            live = d[j] > VAR_FLOOR * scale
            proj = np.sum(centered[i] * g[j], axis=0) / (k - 1)
            coef = np.where(live, proj / np.where(live, d[j], 1.0), 0.0)
            e[i, j] = coef
            gi -= coef * g[j]
            A[i] -= coef * A[j]
        g[i] = gi
        d[i] = np.sum(gi**2, axis=0) / (k - 1)
    return GramSchmidtBasis(g, d, e, A)


def _solve_direct(C: np.ndarray, b: np.ndarray):
    """Batched ``C^{-1} b`` with ridge regularization for ill-conditioned points."""
    n_ctrl = C.shape[-1]
    tr = np.trace(C, axis1=-2, axis2=-1)
    dead = tr <= VAR_FLOOR * max(float(np.max(tr)), 0.0)
    C = np.where(dead[..., None, None], np.eye(n_ctrl), C)
    b = np.where(dead[..., None], 0.0, b)
    cond = np.linalg.cond(C)
    ill = ~np.isfinite(cond) | (cond > COND_LIMIT)
    ridge = RIDGE * np.trace(C, axis1=-2, axis2=-1) / n_ctrl
    C = C + np.where(ill, ridge, 0.0)[..., None, None] * np.eye(n_ctrl)
    lam = np.linalg.solve(C, b[..., None])[..., 0]
    return lam, int(np.count_nonzero(ill)), int(np.count_nonzero(dead))


def mmscv_estimate(hf, lf_list: Sequence, lf_mean_refs: Sequence, mode: str = "direct") -> EstimatorOutput:
    """``E_K[hf] - sum_i lam_i (E_K[F_i] - E_ref[F_i])`` with optimal coefficients.

    ``direct`` solves ``C lam = b`` pointwise; ``orthogonal`` uses the
    Gram-Schmidt basis and maps its coefficients back to ``lam``.
    """
    if not lf_list or len(lf_list) != len(lf_mean_refs):
        raise InvalidInputError("need one reference mean per control")
    _check_crn(hf, *lf_list)
    a = _values(hf)
    F = np.stack([_values(x) for x in lf_list])  # (I, K, ...)
    refs = np.stack([np.asarray(r, dtype=float) for r in lf_mean_refs])
    if F.shape[1:] != a.shape or refs.shape[1:] != a.shape[1:]:
        raise InvalidInputError("control and reference shapes must match the high-fidelity samples")
    k, n_ctrl = a.shape[0], F.shape[0]
    if k < 2:
        raise InvalidInputError("need K >= 2 samples")
    notes = {}
    if mode == "direct":
        Fc = F - F.mean(axis=1, keepdims=True)
        ac = a - a.mean(axis=0)
        C = np.einsum("ik...,jk...->...ij", Fc, Fc) / (k - 1)
        bvec = np.einsum("ik...,k...->...i", Fc, ac) / (k - 1)
        try:
            lam_last, n_ridge, n_dead = _solve_direct(C, bvec)
            lam = np.moveaxis(lam_last, -1, 0)
            notes.update(ridge_points=n_ridge, degenerate_points=n_dead)
        except np.linalg.LinAlgError:
            notes["fallback"] = "orthogonal"
            mode = "orthogonal"
    if mode == "orthogonal":
        basis = gram_schmidt(F)
        ac = a - a.mean(axis=0)
        scale = max(float(np.max(basis.d)), 0.0)
        ok = basis.d > VAR_FLOOR * scale
        gamma = np.where(ok, np.sum(basis.g * ac[None], axis=1) / (k - 1) / np.where(ok, basis.d, 1.0), 0.0)
        # sum_k gamma_k g_k = sum_k gamma_k sum_i A_ki (F_i - mean_i)
        lam = np.einsum("k...,ki...->i...", gamma, basis.transform)
        notes["gamma"] = gamma
    elif mode != "direct":
        raise ConfigurationError(f"unknown multiple-control mode {mode!r}")
    controlled = a - np.sum(lam[:, None] * F, axis=0)
    mean = a.mean(axis=0) - np.sum(lam * (F.mean(axis=1) - refs), axis=0)
    var = controlled.var(axis=0, ddof=1)
    corr = np.stack([_correlation(a, F[i]) for i in range(n_ctrl)])
    return EstimatorOutput(mean, var, lam, corr, k, f"mmscv-{mode}", notes)


# -------------------------------------------------------------- Gauss-Lobatto


def lobatto_nodes(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Lobatto nodes and weights on ``[-1, 1]`` (weights sum to 2)."""
    if n < 2:
        raise ConfigurationError("Gauss-Lobatto needs at least two nodes")
    leg = np.polynomial.legendre.Legendre.basis(n - 1)
    interior = np.sort(leg.deriv().roots().real) if n > 2 else np.empty(0)
    x = np.concatenate([[-1.0], interior, [1.0]])
    w = 2.0 / (n * (n - 1) * leg(x) ** 2)
    return x, w


def gauss_lobatto_rule(spec: RandomInputSpec, n_cells: int, n_nodes: int) -> tuple[np.ndarray, np.ndarray]:
    """Composite Gauss-Lobatto nodes ``(P, d_z)`` and probability weights ``(P,)`` for uniform ``z``.

    Endpoints shared by neighbouring cells are merged; weights sum to 1.
    """
    if spec.dim > 2:
        raise ConfigurationError("tensorized Gauss-Lobatto reference supports d_z <= 2")
    if n_cells < 1:
        raise ConfigurationError("n_cells must be >= 1")
    x, w = lobatto_nodes(n_nodes)
    axes = []
    for lo, hi in spec.box:
        h = (hi - lo) / n_cells
        pts = np.concatenate([lo + h * (i + 0.5 * (x + 1.0)) for i in range(n_cells)])
        wts = np.tile(0.5 * w / n_cells, n_cells)
        uniq, inv = np.unique(np.round(pts, 14), return_inverse=True)
        merged = np.zeros(uniq.size)
        np.add.at(merged, inv, wts)
        axes.append((uniq, merged))
    grids = np.meshgrid(*[a for a, _ in axes], indexing="ij")
    weights = np.ones(1)
    for _, wt in axes:
        weights = np.multiply.outer(weights, wt)
    return np.stack([g.ravel() for g in grids], axis=-1), weights.ravel()


def gauss_lobatto_reference(
    spec: RandomInputSpec,
    evaluator: Callable[[np.ndarray], np.ndarray],
    n_cells: int = 8,
    n_nodes: int = 5,
    batch_size: int | None = None,
) -> np.ndarray:
    nodes, weights = gauss_lobatto_rule(spec, n_cells, n_nodes)
    ids = np.arange(len(weights))
    vals = evaluate(SampleSet(nodes, 0, ids), evaluator, batch_size=batch_size).values
    return np.tensordot(weights, vals, axes=(0, 0))


# ------------------------------------------------------------------- metrics


def l1_expectation_error(estimate, reference, grid: VelocityGrid, s: int = 0, dx: float | None = None) -> float:
    """Weighted L1 norm of ``estimate - reference`` over velocity (and space if ``dx``)."""
    est, ref = np.asarray(estimate, dtype=float), np.asarray(reference, dtype=float)
    if est.shape != ref.shape:
        raise InvalidInputError(f"grid mismatch {est.shape} vs {ref.shape}")
    return float(weighted_norm(est - ref, grid, s=s, p=1, dx=dx))


def l1_profile_error(estimate, reference, dx: float) -> np.ndarray:
    """``sum |a - b| dx`` over the trailing (spatial) axis."""
    est, ref = np.asarray(estimate, dtype=float), np.asarray(reference, dtype=float)
    if est.shape != ref.shape:
        raise InvalidInputError(f"grid mismatch {est.shape} vs {ref.shape}")
    return np.sum(np.abs(est - ref), axis=-1) * dx


def fit_rate(counts, errors) -> float:
    """Least-squares slope of ``log(error)`` against ``log(count)``."""
    return float(np.polyfit(np.log(np.asarray(counts, float)), np.log(np.asarray(errors, float)), 1)[0])

