"""
Low-rank ensemble Kalman filter.

An ensemble of P particles is stored as X^(p) = U0hat + U Yhat^(p), with
Yhat a P x R matrix of zero-sample-mean reduced particles and U orthonormal
in the model's inner product (mass matrix for FEM models). Two integrators:

  em    Euler-Maruyama on the mean/mode/particle equations (identity mass)
  bug   basis-update & Galerkin step: semi-implicit mean and mode predictor,
        augmented basis [U, U~], reduced semi-implicit solve, SVD truncation
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, NamedTuple, Optional, Tuple

import numpy as np
import scipy.linalg as la

from .dlr_kbp import oja_step, project_operators, stiefel_defect
from .errors import (
    DimensionMismatch,
    EmptyBasis,
    ModelError,
    NonFiniteState,
    RankExceedsWidth,
    SolveFailed,
    TooFewParticles,
)
from .linalg import Matrix, dense, ensure_finite, mm, symmetrize
from .model_core import LinearAffineModel, ObservationPath, ParticleNoise, sample_gaussian
from .serialization import write_csv, write_lowrank_snapshot

logger = logging.getLogger(__name__)

DROP_TOLERANCE = 1e-10
INTEGRATORS = ("em", "bug")
DIAGNOSTICS_HEADER = ["t", "rmse_ensemble", "trace_Mhat", "trunc_err", "stiefel_defect", "dropped_cols"]


# ============================================================================
# DATA MODELS
# ============================================================================

@dataclass
class ReducedEnsemble:
    U0hat: np.ndarray         # sample mean, d
    U: np.ndarray             # physical modes, d x R
    Yhat: np.ndarray          # reduced particles, P x R

    def __post_init__(self):
        if self.Yhat.ndim != 2 or self.Yhat.shape[1] != self.U.shape[1]:
            raise DimensionMismatch(f"Yhat {self.Yhat.shape} does not match rank {self.U.shape[1]}")

    @property
    def n_particles(self) -> int:
        return self.Yhat.shape[0]

    @property
    def rank(self) -> int:
        return self.U.shape[1]


@dataclass
class BugStepReport:
    discarded: np.ndarray = field(default_factory=lambda: np.zeros(0))
    trunc_err: float = 0.0
    orth_defect: float = 0.0
    dropped_cols: int = 0
    padded_cols: int = 0
    tie: bool = False


class TruncatedSVD(NamedTuple):
    U_R: np.ndarray           # q x R rotation of the augmented basis
    S_R: np.ndarray           # R leading singular values
    V_R: np.ndarray           # P x R, V_R^T V_R = I
    discarded: np.ndarray     # remaining singular values
    tie: bool


@dataclass
class DLREnKFResult:
    times: np.ndarray
    final: ReducedEnsemble
    diagnostics: np.ndarray
    reports: List[BugStepReport] = field(default_factory=list, repr=False)

    @property
    def rmse_series(self) -> np.ndarray:
        return self.diagnostics[:, 1]

    def write_diagnostics(self, path) -> None:
        write_csv(path, DIAGNOSTICS_HEADER, self.diagnostics)


# ============================================================================
# ENSEMBLE CONSTRUCTION
# ============================================================================

def reduced_ensemble_from_draws(U0: np.ndarray, U: np.ndarray, Z: np.ndarray) -> ReducedEnsemble:
    """Splits P x R draws into their sample mean (moved to U0) and zero-mean particles."""
    z_bar = Z.mean(axis=0)
    return ReducedEnsemble(U0hat=U0 + mm(U, z_bar), U=U.copy(), Yhat=Z - z_bar)


def init_reduced_ensemble(U0: np.ndarray, U: np.ndarray, MY0: np.ndarray, P: int,
                          stream: np.random.Generator) -> ReducedEnsemble:
    if P < 2:
        raise TooFewParticles(f"an ensemble needs P >= 2, got {P}")
    return reduced_ensemble_from_draws(U0, U, sample_gaussian(MY0, stream, P))


def _cholesky_factor(W: Matrix) -> np.ndarray:
    return np.linalg.cholesky(dense(W))


def truncate_ensemble(particles: np.ndarray, R: int, W: Optional[Matrix] = None) -> ReducedEnsemble:
    """Best rank-R representation (W-weighted l2_P sense) of a d x P ensemble."""
    d, P = particles.shape
    if R > min(d, P):
        raise RankExceedsWidth(f"rank {R} exceeds min(d, P) = {min(d, P)}")
    mean = particles.mean(axis=1)
    star = particles - mean[:, None]
    if W is None:
        Q, s, Vt = np.linalg.svd(star, full_matrices=False)
        U = Q[:, :R]
    else:
        L = _cholesky_factor(W)
        Q, s, Vt = np.linalg.svd(L.T @ star, full_matrices=False)
        U = la.solve_triangular(L.T, Q[:, :R], lower=False)
    Y = Vt[:R].T * s[:R]
    y_bar = Y.mean(axis=0)
    return ReducedEnsemble(U0hat=mean + U @ y_bar, U=U, Yhat=Y - y_bar)


def reconstruct_particles(ens: ReducedEnsemble) -> np.ndarray:
    """X^(p) = U0hat + U Yhat^(p), d x P."""
    return ens.U0hat[:, None] + mm(ens.U, ens.Yhat.T)


# ============================================================================
# ELEMENTARY OPERATIONS
# ============================================================================

def star_increments(increments: np.ndarray) -> np.ndarray:
    """Subtracts the ensemble (row) mean from P x q increments."""
    if increments.shape[0] < 2:
        raise TooFewParticles("star increments need at least two particles")
    return increments - increments.mean(axis=0)


def sample_reduced_cov(ens: ReducedEnsemble) -> np.ndarray:
    """M = Yhat^T Yhat / (P - 1)."""
    P = ens.n_particles
    if P < 2:
        raise TooFewParticles(f"sample reduced covariance needs P >= 2, got {P}")
    return symmetrize(mm(ens.Yhat.T, ens.Yhat)) / (P - 1)


def weighted_qr(V: np.ndarray, W: Optional[Matrix] = None,
                drop_tol: float = DROP_TOLERANCE) -> Tuple[np.ndarray, List[int]]:
    """
    Modified Gram-Schmidt (two passes) in the W inner product.

    Columns whose residual W-norm falls below drop_tol times their input
    W-norm are dropped; returns (Q, dropped column indices) with Q^T W Q = I.
    """
    basis: List[np.ndarray] = []
    weighted: List[np.ndarray] = []
    dropped: List[int] = []
    for j in range(V.shape[1]):
        v = np.array(V[:, j], dtype=float)
        Wv = v if W is None else mm(W, v)
        norm0 = np.sqrt(max(float(v @ Wv), 0.0))
        for _ in range(2):
            for q, Wq in zip(basis, weighted):
                v -= (Wq @ v) * q
        Wv = v if W is None else mm(W, v)
        norm = np.sqrt(max(float(v @ Wv), 0.0))
        if norm0 == 0.0 or norm <= drop_tol * norm0:
            dropped.append(j)
            continue
        basis.append(v / norm)
        weighted.append(Wv / norm)
    if not basis:
        raise EmptyBasis(f"all {V.shape[1]} columns dropped during orthonormalization")
    if dropped:
        logger.debug(f"weighted_qr dropped column(s) {dropped}")
    return np.column_stack(basis), dropped


def truncate_svd(Y: np.ndarray, R: int) -> TruncatedSVD:
    """Rank-R truncated SVD Y ~ V_R diag(S_R) U_R^T of a P x q block."""
    q = Y.shape[1]
    if R > q:
        raise RankExceedsWidth(f"cannot truncate width-{q} block to rank {R}")
    left, s, right_t = np.linalg.svd(Y, full_matrices=False)
    r = min(R, s.size)
    tie = bool(r < s.size and r > 0 and s[r] > 0.0 and np.isclose(s[r - 1], s[r], rtol=1e-14, atol=0.0))
    if tie:
        logger.warning(f"truncate_svd: singular values {r} and {r + 1} tie at {s[r]:.6e}")
    return TruncatedSVD(U_R=right_t[:r].T, S_R=s[:r], V_R=left[:, :r], discarded=s[r:], tie=tie)


def _pad_basis(U: np.ndarray, n_extra: int, W: Optional[Matrix],
               stream: np.random.Generator) -> np.ndarray:
    """n_extra random columns W-orthonormal to U."""
    candidates = stream.standard_normal((U.shape[0], n_extra))
    Q, _ = weighted_qr(np.hstack([U, candidates]), W)
    return Q[:, U.shape[1]:U.shape[1] + n_extra]


# ============================================================================
# INTEGRATORS
# ============================================================================

def dlr_enkf_em_step(model: LinearAffineModel, ens: ReducedEnsemble, dZ: np.ndarray, dt: float,
                     dW: np.ndarray, dV: np.ndarray) -> ReducedEnsemble:
    """
    One Euler-Maruyama step; dW (P x d) and dV (P x k) are per-particle increments.

    The mean gains (A U0 + f)dt + P H^T Gamma^-1 (dZ - H U0 dt - Gamma^(1/2) mean(dV))
    + Pi_U Sigma^(1/2) mean(dW); U follows the Oja step; each reduced particle
    is driven by its star increments.
    """
    if model.mass is not None:
        raise ModelError("the Euler-Maruyama DLR-EnKF step needs an identity-mass model; use 'bug'")
    U, U0, Y = ens.U, ens.U0hat, ens.Yhat
    M_hat = sample_reduced_cov(ens)
    ops = project_operators(model, U)
    w_bar, v_bar = dW.mean(axis=0), dV.mean(axis=0)

    innovation = dZ - mm(model.H, U0) * dt - mm(model.Gamma_sqrt, v_bar)
    gain = mm(U, mm(M_hat, mm(U.T, mm(model.HtGinv, innovation))))
    mean_noise = mm(U, mm(ops.Sigma_sqrt_U.T, w_bar))
    U0_next = U0 + (mm(model.A, U0) + model.f) * dt + gain + mean_noise

    U_next = oja_step(model.A, U, dt)

    drift = ops.A_U - mm(M_hat, ops.S_U)
    Y_next = (Y + mm(Y, drift.T) * dt + mm(star_increments(dW), ops.Sigma_sqrt_U)
              - mm(star_increments(dV), mm(ops.G, M_hat)))

    ensure_finite(U0_next, "DLR-EnKF mean")
    ensure_finite(Y_next, "DLR-EnKF reduced particles")
    return ReducedEnsemble(U0hat=U0_next, U=U_next, Yhat=Y_next)


def bug_step(model: LinearAffineModel, ens: ReducedEnsemble, dZ: np.ndarray, dt: float,
             dW: np.ndarray, dV: np.ndarray,
             pad_stream: Optional[np.random.Generator] = None) -> Tuple[ReducedEnsemble, BugStepReport]:
    """
    Basis-update & Galerkin step with semi-implicit solves in (M - dt A).

    1. mean:      (M - dt A) U0' = M U0 + dt f + M Pi_U Sigma^(1/2) mean(dW)
                                   + M P H^T Gamma^-1 [dZ - H U0 dt - Gamma^(1/2) mean(dV)]
    2. predictor: (M - dt A) U~ = M U - dt M U M S_U
    3. basis:     Ubar = W-orthonormalized [U, U~]
    4. particles: (I - dt Ubar^T A Ubar) Y~'^T = projected right-hand side
    5. truncate Y~' back to rank R and rotate Ubar accordingly

    When fewer than R directions survive, the missing basis columns are drawn
    from `pad_stream`; without one the step raises ModelError.
    """
    W = model.mass
    U, U0, Y = ens.U, ens.U0hat, ens.Yhat
    R = ens.rank
    M_hat = sample_reduced_cov(ens)
    S_U = symmetrize(mm(U.T, mm(model.S, U)))
    G = mm(model.Gamma_inv_sqrt, mm(model.H, U))
    solve = model.semi_implicit_solver(dt)
    w_bar, v_bar = dW.mean(axis=0), dV.mean(axis=0)

    # 1. mean
    innovation = dZ - mm(model.H, U0) * dt - mm(model.Gamma_sqrt, v_bar)
    gain = mm(U, mm(M_hat, mm(U.T, mm(model.HtGinv, innovation))))
    sigma_w = mm(model.Sigma_sqrt, w_bar)
    projected_noise = mm(U, mm(U.T, model.apply_mass(sigma_w)))
    U0_next = solve(model.apply_mass(U0 + projected_noise + gain) + dt * model.f)

    # 2. mode predictor
    U_tilde = solve(model.apply_mass(U - dt * mm(U, mm(M_hat, S_U))))

    # 3. augmented basis
    U_bar, dropped = weighted_qr(np.hstack([U, U_tilde]), W)
    q = U_bar.shape[1]
    WU_bar = model.apply_mass(U_bar)
    C = mm(WU_bar.T, U)

    # 4. reduced particles
    A_bar = mm(U_bar.T, mm(model.A, U_bar))
    noise_basis = mm(model.Sigma_sqrt, WU_bar)
    rhs = (mm(Y, C.T) - dt * mm(Y, mm(S_U, mm(M_hat, C.T)))
           + mm(star_increments(dW), noise_basis)
           - mm(star_increments(dV), mm(G, mm(M_hat, C.T))))
    try:
        Y_tilde = la.solve(np.eye(q) - dt * A_bar, rhs.T).T
    except (la.LinAlgError, ValueError) as e:
        raise SolveFailed(f"reduced semi-implicit system is singular: {e}") from e

    # 5. truncation
    width = min(R, q)
    trunc = truncate_svd(Y_tilde, width)
    r = trunc.S_R.size
    U_next = mm(U_bar, trunc.U_R)
    Y_next = trunc.V_R * trunc.S_R
    padded = R - r
    if padded:
        if pad_stream is None:
            raise ModelError(f"BUG step needs {padded} padding column(s) but no pad_stream was given")
        U_next = np.hstack([U_next, _pad_basis(U_next, padded, W, pad_stream)])
        Y_next = np.hstack([Y_next, np.zeros((Y_next.shape[0], padded))])
        logger.warning(f"[BUG] only {r} directions available, padded {padded} basis column(s)")
    y_bar = Y_next.mean(axis=0)
    Y_next = Y_next - y_bar
    U0_next = U0_next + mm(U_next, y_bar)

    ensure_finite(U0_next, "DLR-EnKF mean")
    ensure_finite(Y_next, "DLR-EnKF reduced particles")
    report = BugStepReport(
        discarded=trunc.discarded,
        trunc_err=float(np.sqrt(np.sum(trunc.discarded ** 2))),
        orth_defect=stiefel_defect(U_next, W),
        dropped_cols=len(dropped),
        padded_cols=padded,
        tie=trunc.tie,
    )
    return ReducedEnsemble(U0hat=U0_next, U=U_next, Yhat=Y_next), report


# ============================================================================
# DRIVERS
# ============================================================================

def _ensemble_rmse_factored(ens: ReducedEnsemble, x_signal: np.ndarray, W: Optional[Matrix]) -> float:
    # uses U^T W U = I and zero-mean Yhat
    e = ens.U0hat - x_signal
    We = e if W is None else mm(W, e)
    return float(np.sqrt(max(float(e @ We) + float(np.sum(ens.Yhat ** 2)) / ens.n_particles, 0.0)))


def iterate_dlr_enkf(model: LinearAffineModel, ens0: ReducedEnsemble, obs: ObservationPath,
                     noise_w: ParticleNoise, noise_v: ParticleNoise, integrator: str = "em",
                     pad_stream: Optional[np.random.Generator] = None
                     ) -> Iterator[Tuple[int, ReducedEnsemble, BugStepReport]]:
    if integrator not in INTEGRATORS:
        raise ModelError(f"unknown integrator '{integrator}', expected one of {INTEGRATORS}")
    ens = ens0
    yield 0, ens, BugStepReport(orth_defect=stiefel_defect(ens.U, model.mass))
    for n in range(obs.n_steps):
        dW, dV = noise_w.next(), noise_v.next()
        try:
            if integrator == "em":
                ens = dlr_enkf_em_step(model, ens, obs.dZ[n], obs.dt, dW, dV)
                report = BugStepReport(orth_defect=stiefel_defect(ens.U))
            else:
                ens, report = bug_step(model, ens, obs.dZ[n], obs.dt, dW, dV, pad_stream)
        except NonFiniteState as e:
            logger.error(f"[DLR-EnKF] catastrophic divergence at step {n + 1}")
            raise e.at_step(n + 1) from e
        yield n + 1, ens, report


def run_dlr_enkf(model: LinearAffineModel, ens0: ReducedEnsemble, obs: ObservationPath,
                 noise_w: ParticleNoise, noise_v: ParticleNoise, integrator: str = "em",
                 signal: Optional[np.ndarray] = None, pad_stream: Optional[np.random.Generator] = None,
                 snapshot_dir: Optional[Path] = None, snapshot_stride: int = 0,
                 log_every: int = 1000) -> DLREnKFResult:
    rows, reports = [], []
    ens = ens0
    for n, ens, report in iterate_dlr_enkf(model, ens0, obs, noise_w, noise_v, integrator, pad_stream):
        err = _ensemble_rmse_factored(ens, signal[n], model.mass) if signal is not None else float("nan")
        trace = float(np.sum(ens.Yhat ** 2)) / (ens.n_particles - 1)
        rows.append((n * obs.dt, err, trace, report.trunc_err, report.orth_defect, report.dropped_cols))
        reports.append(report)
        if snapshot_dir is not None and snapshot_stride and n % snapshot_stride == 0:
            write_lowrank_snapshot(snapshot_dir, n, U0hat=ens.U0hat, U=ens.U, Yhat=ens.Yhat)
        if log_every and n % log_every == 0:
            logger.debug(f"[DLR-EnKF] step {n}: trace_Mhat={trace:.4e}, trunc_err={report.trunc_err:.3e}")
    return DLREnKFResult(times=obs.times, final=ens, diagnostics=np.array(rows), reports=reports)
