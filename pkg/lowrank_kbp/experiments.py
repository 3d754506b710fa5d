"""
Study orchestration: problem construction, truth generation, the six study
kinds, the replicate worker pool and the run output tree.

Output tree of a run:

    config.json                 resolved configuration (re-runnable)
    summary.json                schema version, seed, config hash, git revision, study results
    timings.json                wall-clock per replicate and filter
    study_<metric>.csv          x, mean, std, n_replicates
    replicate_<r>/mean.csv      filter mean (strided), header t,x_0..
    replicate_<r>/<filter>_diagnostics.csv
    replicate_<r>/modes/...     optional LRKB snapshots
    fem/                        matrix-market export of the FEM operators
"""

import json
import logging
import shutil
import subprocess
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .config import (
    DEFAULT_THREADS,
    OUTPUT_ROOT,
    SCHEMA_VERSION,
    RunConfig,
    validate_config,
    write_config_snapshot,
)
from .dlr_enkf import (
    iterate_dlr_enkf,
    reconstruct_particles,
    reduced_ensemble_from_draws,
    run_dlr_enkf,
    sample_reduced_cov,
    truncate_ensemble,
)
from .dlr_kbp import W2_MAX_DIMENSION, iterate_dlr_kbp_process, run_reduced_kb
from .errors import ConfigError, SchemaMismatch, ToleranceExceeded
from .kbp_full import FullEnsemble, iterate_enkf, run_enkf, run_kb
from .linalg import Matrix
from .metrics import (
    StudyAccumulator,
    best_rank_ensemble_error,
    ell2p_distance,
    ensemble_singular_values,
    irmse,
)
from .model_core import (
    LinearAffineModel,
    LowRankState,
    ObservationPath,
    ParticleNoise,
    RngPlan,
    advection_initial_condition,
    build_model,
    build_upwind_model,
    sample_gaussian,
    sample_low_rank_ic,
    simulate_observations,
    simulate_signal,
    truncate_low_rank,
)
from .serialization import read_csv, write_csv, write_trajectory_csv
from .spatial_fem import (
    FemOperators,
    QuadMesh,
    assemble_operators,
    build_fem_model,
    build_mesh,
    default_squares,
    export_fem,
    fem_initial_condition,
)

logger = logging.getLogger(__name__)

NOISE_BUFFER_ENTRIES = 1 << 22     # per ParticleNoise, floats


# ============================================================================
# DATA MODELS
# ============================================================================

@dataclass
class Problem:
    model: LinearAffineModel
    ic: LowRankState
    mesh: Optional[QuadMesh] = None
    operators: Optional[FemOperators] = None

    @property
    def W(self) -> Optional[Matrix]:
        return self.model.mass


@dataclass
class ReplicateOutput:
    replicate: int
    accumulators: Dict[str, StudyAccumulator] = field(default_factory=dict)
    scalars: Dict[str, float] = field(default_factory=dict)
    series: Dict[str, np.ndarray] = field(default_factory=dict)
    timings: Dict[str, float] = field(default_factory=dict)

    def record(self, metric: str, x: float, value: float) -> None:
        self.accumulators.setdefault(metric, StudyAccumulator(metric)).add(x, self.replicate, value)


@dataclass
class RunContext:
    config: RunConfig
    plan: RngPlan
    root: Path
    problem: Problem

    @property
    def dt(self) -> float:
        return self.config.discretization.dt

    @property
    def n_steps(self) -> int:
        return self.config.discretization.n_steps

    def replicate_dir(self, replicate: int) -> Path:
        path = self.root / f"replicate_{replicate}"
        path.mkdir(parents=True, exist_ok=True)
        return path

    def snapshot_dir(self, replicate: int, label: str) -> Optional[Path]:
        if not self.config.output.dump_modes:
            return None
        return self.replicate_dir(replicate) / "modes" / label


# ============================================================================
# PROBLEMS AND TRUTH
# ============================================================================

def build_problem(config: RunConfig, sigma: Optional[float] = None) -> Problem:
    """Model and initial condition of the configured builtin (sigma overrides model.sigma)."""
    m = config.model
    sigma = m.sigma if sigma is None else sigma
    if m.builtin == "advection":
        model = build_upwind_model(m.d, m.length, m.decay, m.forcing, sigma, m.gamma)
        return Problem(model=model, ic=advection_initial_condition(m.d, m.length, m.true_rank))
    if m.builtin == "fem":
        mesh = build_mesh(m.nodes, m.nodes)
        operators = assemble_operators(mesh, m.diffusion, m.velocity)
        squares = [tuple(s) for s in m.squares] if m.squares is not None else None
        model, operators = build_fem_model(mesh, operators, m.observation, sigma, m.gamma, squares)
        ic = fem_initial_condition(mesh, operators.M, m.true_rank)
        return Problem(model=model, ic=ic, mesh=mesh, operators=operators)
    data = np.load(m.matrices)
    try:
        model = build_model(data["A"], data["f"], data["Sigma"] * (sigma / m.sigma if m.sigma else 1.0),
                            data["H"], data["Gamma"], data["mass"] if "mass" in data else None)
        ic = LowRankState(U0=data["U0"], U=data["U"], MY=data["MY"])
    except KeyError as e:
        raise ConfigError("model.matrices", f"missing array {e}") from e
    return Problem(model=model, ic=ic)


def generate_truth(problem: Problem, plan: RngPlan, replicate: int, dt: float,
                   n_steps: int) -> Tuple[np.ndarray, ObservationPath]:
    """Signal drawn from the initial distribution and its observations, fixed per replicate."""
    ic = problem.ic
    x0 = sample_low_rank_ic(ic.U0, ic.U, ic.MY, plan.generator("signal-x0", replicate))
    signal = simulate_signal(problem.model, x0, dt, n_steps, plan.generator("signal", replicate))
    obs = simulate_observations(problem.model, signal, dt, plan.generator("observation", replicate))
    return signal, obs


def _initial_draws(ctx: RunContext, replicate: int, P: int) -> np.ndarray:
    return sample_gaussian(ctx.problem.ic.MY, ctx.plan.generator(f"ensemble-init-P{P}", replicate), P)


def _particle_noise(ctx: RunContext, model: LinearAffineModel, replicate: int, P: int,
                    n_particles: Optional[int] = None) -> Tuple[ParticleNoise, ParticleNoise]:
    """Particle streams for an ensemble of size P; n_particles < P takes the first streams only."""
    count = P if n_particles is None else n_particles
    chunk = max(1, min(64, NOISE_BUFFER_ENTRIES // (count * max(model.d, model.k))))
    noise_w = ParticleNoise.from_plan(ctx.plan, f"particle-w-P{P}", replicate, count, model.d, ctx.dt, chunk)
    noise_v = ParticleNoise.from_plan(ctx.plan, f"particle-v-P{P}", replicate, count, model.k, ctx.dt, chunk)
    return noise_w, noise_v


def _write_means(ctx: RunContext, replicate: int, times: np.ndarray, means: np.ndarray,
                 name: str = "mean.csv") -> None:
    stride = max(1, ctx.config.output.stride)
    idx = np.arange(0, len(times), stride)
    if idx[-1] != len(times) - 1:
        idx = np.append(idx, len(times) - 1)
    write_trajectory_csv(ctx.replicate_dir(replicate) / name, times[idx], means[idx])


def _timed(out: ReplicateOutput, label: str, fn: Callable):
    start = time.perf_counter()
    result = fn()
    out.timings[label] = time.perf_counter() - start
    return result


# ============================================================================
# STUDIES
# ============================================================================

def _replicate_single(ctx: RunContext, replicate: int) -> ReplicateOutput:
    out = ReplicateOutput(replicate)
    flt, problem = ctx.config.filter, ctx.problem
    model, ic, W = problem.model, problem.ic, problem.W
    signal, obs = generate_truth(problem, ctx.plan, replicate, ctx.dt, ctx.n_steps)
    rep_dir = ctx.replicate_dir(replicate)
    T = ctx.config.discretization.T

    if flt.kind == "kbp":
        result = _timed(out, "kbp", lambda: run_kb(model, ic.U0, ic.covariance(), obs, signal))
        series, means = result.diagnostics[:, 3], result.means
    elif flt.kind == "dlr-kbp":
        if flt.rank > ic.rank:
            raise ConfigError("filter.rank", f"{flt.rank} exceeds the initial rank {ic.rank}")
        state0 = truncate_low_rank(ic, flt.rank)
        reference = (ic.U0, ic.covariance()) if model.d <= W2_MAX_DIMENSION else None
        result = _timed(out, "dlr-kbp", lambda: run_reduced_kb(
            model, state0, obs, signal, full_reference=reference,
            snapshot_dir=ctx.snapshot_dir(replicate, "dlr-kbp"),
            snapshot_stride=ctx.config.output.snapshot_stride,
            compute_w2=ctx.config.output.w2))
        series, means = result.column("rmse"), result.means
        if result.w2_final is not None:
            out.scalars["w2_final"] = result.w2_final
        if reference is not None:
            out.scalars["cov_err_terminal"] = float(result.column("cov_err_frob")[-1])
            out.scalars["mean_err_terminal"] = float(result.column("mean_err")[-1])
    elif flt.kind == "enkf":
        X0 = ic.U0[:, None] + ic.U @ _initial_draws(ctx, replicate, flt.particles).T
        noise_w, noise_v = _particle_noise(ctx, model, replicate, flt.particles)
        result = _timed(out, "enkf", lambda: run_enkf(model, FullEnsemble(X0), obs, noise_w, noise_v, signal))
        series, means = result.rmse_series, result.means
    else:
        Z = _initial_draws(ctx, replicate, flt.particles)
        if flt.rank == ic.rank:
            ens0 = reduced_ensemble_from_draws(ic.U0, ic.U, Z)
        else:
            ens0 = truncate_ensemble(ic.U0[:, None] + ic.U @ Z.T, flt.rank, W)
        noise_w, noise_v = _particle_noise(ctx, model, replicate, flt.particles)
        result = _timed(out, "dlr-enkf", lambda: run_dlr_enkf(
            model, ens0, obs, noise_w, noise_v, flt.integrator, signal,
            pad_stream=ctx.plan.generator("pad", replicate),
            snapshot_dir=ctx.snapshot_dir(replicate, "dlr-enkf"),
            snapshot_stride=ctx.config.output.snapshot_stride))
        series = result.rmse_series
        means = None

    result.write_diagnostics(rep_dir / f"{flt.kind}_diagnostics.csv")
    if means is not None:
        _write_means(ctx, replicate, obs.times, means)
    out.record("irmse", 0, irmse(series[1:], ctx.dt, T))
    return out


def _replicate_rank_sweep(ctx: RunContext, replicate: int) -> ReplicateOutput:
    out = ReplicateOutput(replicate)
    problem = ctx.problem
    model, ic = problem.model, problem.ic
    signal, obs = generate_truth(problem, ctx.plan, replicate, ctx.dt, ctx.n_steps)
    rep_dir = ctx.replicate_dir(replicate)
    T = ctx.config.discretization.T
    P0 = ic.covariance()

    full = _timed(out, "kbp", lambda: run_kb(model, ic.U0, P0, obs, signal))
    full.write_diagnostics(rep_dir / "kbp_diagnostics.csv")
    _write_means(ctx, replicate, obs.times, full.means)
    baseline = run_kb(model, ic.U0, P0, obs, signal, assimilate=False)
    baseline.write_diagnostics(rep_dir / "kbp-no-assimilation_diagnostics.csv")
    out.scalars["irmse_full"] = irmse(full.diagnostics[1:, 3], ctx.dt, T)
    out.scalars["irmse_no_assimilation"] = irmse(baseline.diagnostics[1:, 3], ctx.dt, T)
    out.scalars["signal_norm_mean"] = float(np.mean(np.linalg.norm(signal, axis=1)))

    violations = 0
    for R in (int(r) for r in ctx.config.study.grid):
        state0 = truncate_low_rank(ic, R)
        # timing includes the lockstep full-order reference
        result = _timed(out, f"dlr-kbp_R{R}", lambda: run_reduced_kb(
            model, state0, obs, signal, full_reference=(ic.U0, P0),
            snapshot_dir=ctx.snapshot_dir(replicate, f"dlr-kbp_R{R}"),
            snapshot_stride=ctx.config.output.snapshot_stride,
            compute_w2=ctx.config.output.w2))
        result.write_diagnostics(rep_dir / f"dlr-kbp_R{R}_diagnostics.csv")
        cov_err, bap = result.column("cov_err_frob"), result.column("bap")
        violations += int(np.count_nonzero(cov_err < bap - 1e-12))
        out.record("cov_err_terminal", R, float(cov_err[-1]))
        out.record("mean_err_terminal", R, float(result.column("mean_err")[-1]))
        out.record("cov_err_rel_max", R, float(np.max(cov_err[1:] / result.column("cov_norm_full")[1:])))
        out.record("mean_err_rel_max", R, float(np.max(result.column("mean_err")[1:]
                                                        / result.column("mean_norm_full")[1:])))
        out.record("irmse", R, irmse(result.column("rmse")[1:], ctx.dt, T))
        if result.w2_final is not None:
            out.record("w2_final", R, result.w2_final)
    out.scalars["bap_violations"] = float(violations)
    return out


def _replicate_sigma_sweep(ctx: RunContext, replicate: int) -> ReplicateOutput:
    out = ReplicateOutput(replicate)
    R = ctx.config.filter.rank
    rep_dir = ctx.replicate_dir(replicate)
    for sigma in ctx.config.study.grid:
        problem = build_problem(ctx.config, sigma=sigma)
        signal, obs = generate_truth(problem, ctx.plan, replicate, ctx.dt, ctx.n_steps)
        ic = problem.ic
        result = _timed(out, f"dlr-kbp_sigma{sigma:g}", lambda: run_reduced_kb(
            problem.model, truncate_low_rank(ic, R), obs, signal,
            full_reference=(ic.U0, ic.covariance()), compute_w2=ctx.config.output.w2))
        result.write_diagnostics(rep_dir / f"dlr-kbp_sigma{sigma:g}_diagnostics.csv")
        out.record("cov_err_terminal", sigma, float(result.column("cov_err_frob")[-1]))
        out.record("mean_err_terminal", sigma, float(result.column("mean_err")[-1]))
        if result.w2_final is not None:
            out.record("w2_final", sigma, result.w2_final)
    return out


def _replicate_poc(ctx: RunContext, replicate: int) -> ReplicateOutput:
    """
    DLR-EnKF(P) against the low-rank process at time T.

    Particle 0 of the ensemble and the reference realization share their
    Brownian streams and their initial draw.
    """
    out = ReplicateOutput(replicate)
    problem = ctx.problem
    model, ic = problem.model, problem.ic
    _, obs = generate_truth(problem, ctx.plan, replicate, ctx.dt, ctx.n_steps)
    for P in (int(p) for p in ctx.config.study.grid):
        Z = _initial_draws(ctx, replicate, P)
        ens0 = reduced_ensemble_from_draws(ic.U0, ic.U, Z)
        noise_w, noise_v = _particle_noise(ctx, model, replicate, P)
        ref_w, ref_v = _particle_noise(ctx, model, replicate, P, n_particles=1)

        start = time.perf_counter()
        ensemble_iter = iterate_dlr_enkf(model, ens0, obs, noise_w, noise_v, "em")
        reference_iter = iterate_dlr_kbp_process(model, ic, Z[0][:, None], obs, ref_w, ref_v)
        for (_, ens, _), (_, state, Y) in zip(ensemble_iter, reference_iter):
            pass
        out.timings[f"poc_P{P}"] = time.perf_counter() - start

        gram_err = float(np.sum((sample_reduced_cov(ens) - state.MY) ** 2))
        mean_err = float(np.sum((ens.U0hat - state.U0) ** 2))
        particle = ens.U0hat + ens.U @ ens.Yhat[0]
        reference = state.U0 + state.U @ Y[:, 0]
        out.record("gram_err", P, gram_err)
        out.record("mean_err", P, mean_err)
        out.record("particle_err", P, float(np.sum((particle - reference) ** 2)))
        logger.debug(f"[Replicate {replicate}] P={P}: gram_err={gram_err:.3e}, mean_err={mean_err:.3e}")
    return out


ENSEMBLE_RMSE_LABELS = ("enkf-small", "enkf", "dlr-enkf")


def _replicate_ensemble_rmse(ctx: RunContext, replicate: int) -> ReplicateOutput:
    """EnKF with few particles, EnKF(P) and DLR-EnKF(R, P) on one truth."""
    out = ReplicateOutput(replicate)
    flt, problem = ctx.config.filter, ctx.problem
    model, ic, W = problem.model, problem.ic, problem.W
    signal, obs = generate_truth(problem, ctx.plan, replicate, ctx.dt, ctx.n_steps)
    rep_dir = ctx.replicate_dir(replicate)
    T = ctx.config.discretization.T

    for index, label in enumerate(ENSEMBLE_RMSE_LABELS):
        P = flt.small_particles if label == "enkf-small" else flt.particles
        X0 = ic.U0[:, None] + ic.U @ _initial_draws(ctx, replicate, P).T
        noise_w, noise_v = _particle_noise(ctx, model, replicate, P)
        if label == "dlr-enkf":
            ens0 = truncate_ensemble(X0, flt.rank, W)
            result = _timed(out, label, lambda: run_dlr_enkf(
                model, ens0, obs, noise_w, noise_v, flt.integrator, signal,
                pad_stream=ctx.plan.generator("pad", replicate),
                snapshot_dir=ctx.snapshot_dir(replicate, label),
                snapshot_stride=ctx.config.output.snapshot_stride))
        else:
            result = _timed(out, label, lambda: run_enkf(model, FullEnsemble(X0), obs, noise_w, noise_v, signal))
        result.write_diagnostics(rep_dir / f"{label}_diagnostics.csv")
        out.series[label] = result.rmse_series
        out.record("rmse_time_avg", index, irmse(result.rmse_series[1:], ctx.dt, T))
    return out


def _replicate_consistency(ctx: RunContext, replicate: int) -> ReplicateOutput:
    """FOM-EnKF against DLR-EnKF(R) for each R of the grid, with matched particle streams."""
    out = ReplicateOutput(replicate)
    flt, problem = ctx.config.filter, ctx.problem
    model, ic, W = problem.model, problem.ic, problem.W
    _, obs = generate_truth(problem, ctx.plan, replicate, ctx.dt, ctx.n_steps)
    P = flt.particles
    ranks = [int(r) for r in ctx.config.study.grid]
    Z = _initial_draws(ctx, replicate, P)
    X0 = ic.U0[:, None] + ic.U @ Z.T

    def ensemble0(R):
        if R == ic.rank:
            return reduced_ensemble_from_draws(ic.U0, ic.U, Z)
        return truncate_ensemble(X0, R, W)

    full_iter = iterate_enkf(model, FullEnsemble(X0), obs, *_particle_noise(ctx, model, replicate, P))
    reduced_iters = [iterate_dlr_enkf(model, ensemble0(R), obs, *_particle_noise(ctx, model, replicate, P),
                                      integrator=flt.integrator, pad_stream=ctx.plan.generator("pad", replicate))
                     for R in ranks]
    rows = []
    start = time.perf_counter()
    for (n, full), *reduced in zip(full_iter, *reduced_iters):
        X = full.particles
        scale = ell2p_distance(X, np.zeros_like(X), W)
        sv = ensemble_singular_values(X, W)
        row = [n * ctx.dt]
        for R, (_, ens, _) in zip(ranks, reduced):
            err = ell2p_distance(reconstruct_particles(ens), X, W) / scale
            bap = best_rank_ensemble_error(X, R, W, singular_values=sv) / scale
            row.extend([err, bap])
        rows.append(row)
    out.timings["consistency"] = time.perf_counter() - start

    rows = np.array(rows)
    header = ["t"] + [f"{name}_R{R}" for R in ranks for name in ("err_rel", "bap_rel")]
    write_csv(ctx.replicate_dir(replicate) / "consistency_diagnostics.csv", header, rows)
    for i, R in enumerate(ranks):
        out.record("err_rel_max", R, float(np.max(rows[:, 1 + 2 * i])))
        out.record("bap_rel_max", R, float(np.max(rows[:, 2 + 2 * i])))
    return out


STUDIES: Dict[str, Callable[[RunContext, int], ReplicateOutput]] = {
    "single": _replicate_single,
    "rank-sweep": _replicate_rank_sweep,
    "sigma-sweep": _replicate_sigma_sweep,
    "poc": _replicate_poc,
    "ensemble-rmse": _replicate_ensemble_rmse,
    "consistency": _replicate_consistency,
}
SLOPE_METRICS = {"gram_err", "mean_err", "particle_err"}


# ============================================================================
# RUN DRIVER
# ============================================================================

def git_revision() -> str:
    try:
        return subprocess.check_output(["git", "rev-parse", "HEAD"], cwd=Path(__file__).resolve().parent,
                                       text=True, stderr=subprocess.DEVNULL).strip()
    except Exception:
        return "unknown"


def prepare_output_dir(root: Path, name: str, force: bool = False) -> Path:
    """Timestamped run directory; --force reuses <root>/<name> and clears it."""
    root = Path(root)
    if force:
        path = root / name
        if path.exists():
            logger.warning(f"Overwriting existing run directory {path}")
            shutil.rmtree(path)
    else:
        stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
        path = root / f"{name}_{stamp}"
        suffix = 1
        while path.exists():
            path = root / f"{name}_{stamp}_{suffix}"
            suffix += 1
    path.mkdir(parents=True)
    return path


def _resolve_geometry(config: RunConfig) -> None:
    m = config.model
    if m.builtin == "fem" and m.observation == "partial" and m.squares is None:
        m.squares = [list(s) for s in default_squares()]


def _run_replicates(ctx: RunContext, threads: int) -> List[ReplicateOutput]:
    worker = STUDIES[ctx.config.study.kind]
    n = ctx.config.study.replicates
    results: List[Optional[ReplicateOutput]] = [None] * n
    with ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
        futures = {executor.submit(worker, ctx, r): r for r in range(n)}
        completed = 0
        for future in as_completed(futures):
            r = futures[future]
            try:
                results[r] = future.result()
            except Exception as e:
                logger.error(f"[Replicate {r}] failed: {e}")
                for other in futures:
                    other.cancel()
                raise
            completed += 1
            logger.info(f"[Study] Progress: {completed}/{n} replicates done")
    return results


def _write_bands(root: Path, outputs: List[ReplicateOutput], dt: float) -> None:
    labels = [label for label in ENSEMBLE_RMSE_LABELS if label in outputs[0].series]
    if not labels:
        return
    columns, header = [], ["t"]
    for label in labels:
        stack = np.vstack([o.series[label] for o in outputs])
        columns.append(stack.mean(axis=0))
        columns.append(stack.std(axis=0, ddof=1) if stack.shape[0] > 1 else np.full(stack.shape[1], np.nan))
        header.extend([f"{label}_mean", f"{label}_std"])
    times = dt * np.arange(len(columns[0]))
    write_csv(root / "rmse_bands.csv", header, np.column_stack([times] + columns))


def run(config: RunConfig, output_root: Optional[Path] = None, threads: int = DEFAULT_THREADS,
        force: bool = False) -> Path:
    """Runs the configured study and writes the output tree; returns the run directory."""
    warnings = validate_config(config)
    _resolve_geometry(config)
    root = prepare_output_dir(Path(output_root or config.output.directory or OUTPUT_ROOT), config.name, force)
    digest = write_config_snapshot(config, root / "config.json")
    logger.info(f"[Study] {config.study.kind} '{config.name}' -> {root} (seed={config.seed}, "
                f"replicates={config.study.replicates}, threads={threads})")

    problem = build_problem(config)
    if problem.mesh is not None:
        export_fem(root / "fem", problem.mesh, problem.operators)
    ctx = RunContext(config=config, plan=RngPlan(config.seed), root=root, problem=problem)
    start = time.perf_counter()
    outputs = _run_replicates(ctx, threads)
    elapsed = time.perf_counter() - start

    merged: Dict[str, StudyAccumulator] = {}
    for output in outputs:
        for metric, acc in output.accumulators.items():
            merged.setdefault(metric, StudyAccumulator(metric)).merge(acc)
    studies = {}
    for metric in sorted(merged):
        result = merged[metric].result(fit_slope=metric in SLOPE_METRICS and config.study.kind == "poc")
        result.to_csv(root / f"study_{metric}.csv")
        studies[metric] = result.summary()
    if config.study.kind == "ensemble-rmse":
        _write_bands(root, outputs, ctx.dt)
        studies["labels"] = list(ENSEMBLE_RMSE_LABELS)

    scalar_names = sorted({k for o in outputs for k in o.scalars})
    scalars = {k: float(np.mean([o.scalars[k] for o in outputs if k in o.scalars])) for k in scalar_names}
    summary = {
        "schema_version": SCHEMA_VERSION,
        "name": config.name,
        "study": config.study.kind,
        "seed": config.seed,
        "config_hash": digest,
        "git_revision": git_revision(),
        "replicates": config.study.replicates,
        "studies": studies,
        "scalars": scalars,
        "warnings": warnings,
    }
    (root / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8")
    timings = {"total_seconds": elapsed, "replicates": {str(o.replicate): o.timings for o in outputs}}
    (root / "timings.json").write_text(json.dumps(timings, indent=2, sort_keys=True), encoding="utf-8")
    logger.info(f"[Study] finished in {elapsed:.1f}s")
    return root


# ============================================================================
# COMPARE
# ============================================================================

def _nan_max_abs(a: np.ndarray, b: np.ndarray) -> float:
    both_nan = np.isnan(a) & np.isnan(b)
    diff = np.abs(np.where(both_nan, 0.0, a - b))
    if np.any(np.isnan(diff)):
        return float("inf")
    return float(diff.max()) if diff.size else 0.0


def compare_runs(dir_a: Path, dir_b: Path) -> Dict:
    """Aligned CSV differences between two run directories (files present in both)."""
    dir_a, dir_b = Path(dir_a), Path(dir_b)
    summaries = []
    for d in (dir_a, dir_b):
        try:
            summaries.append(json.loads((d / "summary.json").read_text(encoding="utf-8")))
        except (OSError, ValueError) as e:
            raise SchemaMismatch(f"{d}: unreadable summary.json ({e})") from e
    if summaries[0].get("schema_version") != summaries[1].get("schema_version"):
        raise SchemaMismatch(f"schema versions differ: {summaries[0].get('schema_version')} "
                             f"vs {summaries[1].get('schema_version')}")

    files_a = {p.relative_to(dir_a) for p in dir_a.rglob("*.csv")}
    files_b = {p.relative_to(dir_b) for p in dir_b.rglob("*.csv")}
    report = {"compared": {}, "only_in_a": sorted(map(str, files_a - files_b)),
              "only_in_b": sorted(map(str, files_b - files_a)), "max_deviation": 0.0}
    for rel in sorted(files_a & files_b):
        header_a, data_a = read_csv(dir_a / rel)
        header_b, data_b = read_csv(dir_b / rel)
        if header_a != header_b or data_a.shape != data_b.shape:
            raise SchemaMismatch(f"{rel}: columns or shapes differ ({data_a.shape} vs {data_b.shape})")
        per_column = {name: _nan_max_abs(data_a[:, j], data_b[:, j]) for j, name in enumerate(header_a)}
        report["compared"][str(rel)] = per_column
        report["max_deviation"] = max(report["max_deviation"], max(per_column.values(), default=0.0))
    return report


def check_tolerance(report: Dict, tolerance: float) -> None:
    offending = {name: max(cols.values(), default=0.0) for name, cols in report["compared"].items()
                 if max(cols.values(), default=0.0) > tolerance}
    if offending:
        worst = max(offending, key=offending.get)
        raise ToleranceExceeded(f"{len(offending)} file(s) differ by more than {tolerance:g}; "
                                f"worst is {worst} ({offending[worst]:.3e})")
