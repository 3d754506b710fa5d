"""
Dynamical low-rank Kalman-Bucy process.

The state is kept in the factored form X = U0 + U Y with Cov(Y) = MY:

  U0   mean mode, driven by the observations
  U    physical modes, an Oja flow on the Stiefel manifold
  Y    stochastic modes (R per realization)
  MY   reduced covariance, solution of an R x R Riccati equation

Covariance products are always applied factored, U (MY (U^T v)), so a
step costs O(d R^2 + nnz) and never O(d^2).
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Tuple

import numpy as np

from .errors import DimensionMismatch, NonFiniteState
from .kbp_full import iterate_kb
from .linalg import Matrix, clamped_psd, ensure_finite, mm, orthonormalize, symmetrize
from .metrics import best_rank_error, gaussian_w2, rmse
from .model_core import LinearAffineModel, LowRankState, ObservationPath, ParticleNoise
from .serialization import write_csv, write_lowrank_snapshot

logger = logging.getLogger(__name__)

W2_MAX_DIMENSION = 2000

DIAGNOSTICS_HEADER = ["t", "mean_err", "cov_err_frob", "bap", "trace_MY", "stiefel_defect",
                      "energy", "rmse", "rmse_full", "mean_norm_full", "cov_norm_full"]


# ============================================================================
# DATA MODELS
# ============================================================================

@dataclass(frozen=True)
class ProjectedOperators:
    """Model operators seen through the current physical modes U."""
    A_U: np.ndarray           # U^T A U
    S_U: np.ndarray           # U^T S U
    Sigma_U: np.ndarray       # U^T Sigma U
    Sigma_sqrt_U: np.ndarray  # Sigma^(1/2) U, d x R
    G: np.ndarray             # Gamma^(-1/2) H U, k x R


@dataclass
class ReducedKBResult:
    times: np.ndarray
    means: np.ndarray
    final: LowRankState
    diagnostics: np.ndarray
    clamp_events: int = 0
    snapshots: List[int] = field(default_factory=list)
    w2_final: Optional[float] = None   # W2 to the full-order Gaussian at the last step

    def column(self, name: str) -> np.ndarray:
        return self.diagnostics[:, DIAGNOSTICS_HEADER.index(name)]

    def write_diagnostics(self, path) -> None:
        write_csv(path, DIAGNOSTICS_HEADER, self.diagnostics)


def project_operators(model: LinearAffineModel, U: np.ndarray) -> ProjectedOperators:
    AU = mm(model.A, U)
    return ProjectedOperators(
        A_U=mm(U.T, AU),
        S_U=symmetrize(mm(U.T, mm(model.S, U))),
        Sigma_U=symmetrize(mm(U.T, mm(model.Sigma, U))),
        Sigma_sqrt_U=mm(model.Sigma_sqrt, U),
        G=mm(model.Gamma_inv_sqrt, mm(model.H, U)),
    )


# ============================================================================
# FACTORED COVARIANCE
# ============================================================================

def reconstruct_cov(U: np.ndarray, MY: np.ndarray) -> np.ndarray:
    """Dense U MY U^T; diagnostics only."""
    return symmetrize(U @ MY @ U.T)


def covariance_matvec(U: np.ndarray, MY: np.ndarray, v: np.ndarray) -> np.ndarray:
    """P v with P = U MY U^T, never formed."""
    return mm(U, mm(MY, mm(U.T, v)))


def energy(A: Matrix, U: np.ndarray) -> float:
    """E(U) = 1/2 tr(U^T A U)."""
    return 0.5 * float(np.sum(U * mm(A, U)))


def stiefel_defect(U: np.ndarray, W: Optional[Matrix] = None) -> float:
    """||U^T W U - I||_F."""
    WU = U if W is None else mm(W, U)
    return float(np.linalg.norm(U.T @ WU - np.eye(U.shape[1])))


# ============================================================================
# STEPS
# ============================================================================

def dlr_mean_step(model: LinearAffineModel, state: LowRankState, dZ: np.ndarray, dt: float) -> np.ndarray:
    """U0' = U0 + (A U0 + f)dt + U MY U^T H^T Gamma^-1 (dZ - H U0 dt)."""
    U0, U = state.U0, state.U
    innovation = dZ - mm(model.H, U0) * dt
    gain = mm(U, mm(state.MY, mm(U.T, mm(model.HtGinv, innovation))))
    return U0 + (mm(model.A, U0) + model.f) * dt + gain


def oja_step(A: Matrix, U: np.ndarray, dt: float, reorthonormalize: bool = True) -> np.ndarray:
    """U~ = U + dt (I - U U^T) A U, then QR with a positive R diagonal."""
    AU = mm(A, U)
    U_tilde = U + dt * (AU - mm(U, mm(U.T, AU)))
    ensure_finite(U_tilde, "physical modes")
    return orthonormalize(U_tilde) if reorthonormalize else U_tilde


def reduced_riccati_step(A: Matrix, Sigma: Matrix, S: Matrix, U: np.ndarray,
                         MY: np.ndarray, dt: float) -> np.ndarray:
    """Explicit Euler on dM/dt = A_U M + M A_U^T - M S_U M + Sigma_U, resymmetrized."""
    A_U = mm(U.T, mm(A, U))
    S_U = mm(U.T, mm(S, U))
    Sigma_U = mm(U.T, mm(Sigma, U))
    AM = mm(A_U, MY)
    drift = AM + AM.T - mm(MY, mm(S_U, MY)) + Sigma_U
    MY_next = symmetrize(MY + dt * drift)
    ensure_finite(MY_next, "reduced covariance")
    return MY_next


def dlr_modes_step(model: LinearAffineModel, U: np.ndarray, MY: np.ndarray, Y: np.ndarray,
                   dt: float, dW: np.ndarray, dV: np.ndarray,
                   ops: Optional[ProjectedOperators] = None) -> np.ndarray:
    """
    Y' = Y + U^T (A - P S) U Y dt + U^T Sigma^(1/2) dW - U^T P H^T Gamma^(-1/2) dV.

    Y is an R-vector or an R x n block of realizations (one per column), with
    dW (d or d x n) and dV (k or k x n) matching. The update never involves
    the observations.
    """
    if Y.shape[0] != U.shape[1]:
        raise DimensionMismatch(f"Y has {Y.shape[0]} rows, expected rank {U.shape[1]}")
    ops = ops or project_operators(model, U)
    drift = ops.A_U - mm(MY, ops.S_U)
    out = (Y + mm(drift, Y) * dt + mm(ops.Sigma_sqrt_U.T, dW)
           - mm(MY, mm(ops.G.T, dV)))
    ensure_finite(out, "stochastic modes")
    return out


def modified_riccati_step(model: LinearAffineModel, U: np.ndarray, P: np.ndarray, dt: float) -> np.ndarray:
    """Full-space explicit Euler on dP/dt = AP + PA^T - PSP + Pi_U Sigma Pi_U."""
    AP = mm(model.A, P)
    projected_noise = U @ mm(U.T, mm(model.Sigma, U)) @ U.T
    drift = AP + AP.T - mm(P, mm(model.S, P)) + projected_noise
    P_next = symmetrize(P + dt * drift)
    ensure_finite(P_next, "modified Riccati covariance")
    return P_next


# ============================================================================
# DRIVERS
# ============================================================================

def dlr_kbp_step(model: LinearAffineModel, state: LowRankState, dZ: np.ndarray, dt: float,
                 reorthonormalize: bool = True) -> LowRankState:
    """Advances (U0, U, MY) jointly, every factor from the values at the start of the step."""
    U0 = dlr_mean_step(model, state, dZ, dt)
    MY, clamped = clamped_psd(reduced_riccati_step(model.A, model.Sigma, model.S, state.U, state.MY, dt))
    U = oja_step(model.A, state.U, dt, reorthonormalize)
    if not np.all(np.isfinite(U0)):
        raise NonFiniteState("mean mode")
    return LowRankState(U0=U0, U=U, MY=MY, clamped=clamped)


def iterate_reduced_kb(model: LinearAffineModel, state0: LowRankState, obs: ObservationPath,
                       reorthonormalize: bool = True) -> Iterator[Tuple[int, LowRankState]]:
    if model.mass is not None:
        model = model.explicit()
    state = state0
    yield 0, state
    for n in range(obs.n_steps):
        try:
            state = dlr_kbp_step(model, state, obs.dZ[n], obs.dt, reorthonormalize)
        except NonFiniteState as e:
            raise e.at_step(n + 1) from e
        yield n + 1, state


def iterate_dlr_kbp_process(model: LinearAffineModel, state0: LowRankState, Y0: np.ndarray,
                            obs: ObservationPath, noise_w: ParticleNoise, noise_v: ParticleNoise
                            ) -> Iterator[Tuple[int, LowRankState, np.ndarray]]:
    """
    Realizations X = U0 + U Y of the low-rank process.

    Y0 is R x n (one realization per column); noise_w / noise_v must provide
    n streams each, so realization j consumes particle stream j.
    """
    state, Y = state0, np.array(Y0, dtype=float)
    yield 0, state, Y
    for n in range(obs.n_steps):
        try:
            Y = dlr_modes_step(model, state.U, state.MY, Y, obs.dt, noise_w.next().T, noise_v.next().T)
            state = dlr_kbp_step(model, state, obs.dZ[n], obs.dt)
        except NonFiniteState as e:
            raise e.at_step(n + 1) from e
        yield n + 1, state, Y


def run_reduced_kb(model: LinearAffineModel, state0: LowRankState, obs: ObservationPath,
                   signal: Optional[np.ndarray] = None,
                   full_reference: Optional[Tuple[np.ndarray, np.ndarray]] = None,
                   snapshot_dir: Optional[Path] = None, snapshot_stride: int = 0,
                   compute_w2: bool = True,
                   log_every: int = 1000) -> ReducedKBResult:
    """
    Runs the low-rank filter and records one diagnostics row per step.

    When `full_reference` = (m0, P0) is given, the full-order filter runs in
    lockstep on the same observations and the comparison columns (mean_err,
    cov_err_frob, bap, ...) are filled; otherwise they are NaN.
    """
    full_iter = iterate_kb(model, *full_reference, obs) if full_reference is not None else None
    R = state0.rank
    rows, means = [], []
    clamp_events = 0
    snapshots: List[int] = []
    state = state0
    nan = float("nan")
    w2_final = None
    last = obs.n_steps
    for n, state in iterate_reduced_kb(model, state0, obs):
        trace = float(np.trace(state.MY))
        err = rmse(state.U0, trace, signal[n]) if signal is not None else nan
        mean_err = cov_err = bap = err_full = m_norm = p_norm = nan
        if full_iter is not None:
            _, m_full, P_full = next(full_iter)
            mean_err = float(np.linalg.norm(state.U0 - m_full))
            cov_err = float(np.linalg.norm(P_full - reconstruct_cov(state.U, state.MY)))
            bap = best_rank_error(P_full, R)
            m_norm = float(np.linalg.norm(m_full))
            p_norm = float(np.linalg.norm(P_full))
            if signal is not None:
                err_full = rmse(m_full, P_full, signal[n])
            if n == last and compute_w2 and model.d <= W2_MAX_DIMENSION:
                w2_final = gaussian_w2(state.U0, reconstruct_cov(state.U, state.MY), m_full, P_full)
        clamp_events += state.clamped
        rows.append((n * obs.dt, mean_err, cov_err, bap, trace, stiefel_defect(state.U),
                     energy(model.A, state.U), err, err_full, m_norm, p_norm))
        means.append(state.U0)
        if snapshot_dir is not None and snapshot_stride and n % snapshot_stride == 0:
            write_lowrank_snapshot(snapshot_dir, n, U0=state.U0, U=state.U, MY=state.MY)
            snapshots.append(n)
        if log_every and n % log_every == 0:
            logger.debug(f"[DLR-KBP] step {n}: trace_MY={trace:.4e}, cov_err={cov_err:.3e}")
    if clamp_events:
        logger.warning(f"[DLR-KBP] clamped {clamp_events} negative eigenvalue(s) of the reduced covariance")
    return ReducedKBResult(times=obs.times, means=np.array(means), final=state,
                           diagnostics=np.array(rows), clamp_events=clamp_events, snapshots=snapshots,
                           w2_final=w2_final)
