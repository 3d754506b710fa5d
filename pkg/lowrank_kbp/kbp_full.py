"""
Full-order reference filters: Kalman-Bucy moments, Kalman-Bucy process
realizations and the plain ensemble Kalman filter.

Everything here works on dense d x d covariances; it is the reference the
low-rank filters are measured against, not the scalable path.
"""

import logging
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Tuple

import numpy as np

from .errors import DimensionMismatch, NonFiniteState, TooFewParticles
from .linalg import ensure_finite, mm, symmetrize
from .metrics import ensemble_rmse, rmse
from .model_core import GaussianState, LinearAffineModel, ObservationPath, ParticleNoise
from .serialization import write_csv

logger = logging.getLogger(__name__)

DIAGNOSTICS_HEADER = ["t", "trace_P", "mean_norm", "rmse"]
ENSEMBLE_DIAGNOSTICS_HEADER = ["t", "trace_P", "mean_norm", "rmse_ensemble"]


# ============================================================================
# DATA MODELS
# ============================================================================

@dataclass
class FullEnsemble:
    """Particles stored column-wise, d x P."""
    particles: np.ndarray

    def __post_init__(self):
        if self.particles.ndim != 2:
            raise DimensionMismatch(f"particles must be d x P, got {self.particles.shape}")

    @property
    def n_particles(self) -> int:
        return self.particles.shape[1]

    @property
    def d(self) -> int:
        return self.particles.shape[0]


@dataclass
class KBResult:
    """Trajectory summary of a moment-level Kalman-Bucy run."""
    times: np.ndarray
    means: np.ndarray              # (n_steps+1) x d
    final: GaussianState
    diagnostics: np.ndarray        # rows of DIAGNOSTICS_HEADER

    def write_diagnostics(self, path) -> None:
        write_csv(path, DIAGNOSTICS_HEADER, self.diagnostics)


@dataclass
class EnKFResult:
    times: np.ndarray
    means: np.ndarray
    final: FullEnsemble
    diagnostics: np.ndarray = field(repr=False)

    @property
    def rmse_series(self) -> np.ndarray:
        return self.diagnostics[:, 3]

    def write_diagnostics(self, path) -> None:
        write_csv(path, ENSEMBLE_DIAGNOSTICS_HEADER, self.diagnostics)


# ============================================================================
# MOMENT-LEVEL KALMAN-BUCY
# ============================================================================

def kb_mean_step(model: LinearAffineModel, m: np.ndarray, P: np.ndarray,
                 dZ: np.ndarray, dt: float) -> np.ndarray:
    """m' = m + (Am + f)dt + P H^T Gamma^-1 (dZ - Hm dt)."""
    innovation = dZ - mm(model.H, m) * dt
    gain = mm(P, mm(model.HtGinv, innovation))
    return m + (mm(model.A, m) + model.f) * dt + gain


def riccati_step(model: LinearAffineModel, P: np.ndarray, dt: float,
                 assimilate: bool = True) -> np.ndarray:
    """Explicit Euler on dP/dt = AP + PA^T - PSP + Sigma, resymmetrized."""
    AP = mm(model.A, P)
    drift = AP + AP.T + model.Sigma_dense
    if assimilate:
        drift = drift - mm(P, mm(model.S, P))
    P_next = symmetrize(P + dt * drift)
    ensure_finite(P_next, "Riccati covariance")
    return P_next


def deterministic_kbp_moment_step(model: LinearAffineModel, m: np.ndarray, P: np.ndarray,
                                  dZ: np.ndarray, dt: float) -> np.ndarray:
    """
    Mean update of the deterministic Kalman-Bucy variant.

    Its innovation uses H (x + m) / 2; at moment level x = m, so this is the
    ordinary mean step. No particle-level scheme is provided.
    """
    midpoint = 0.5 * (m + m)
    innovation = dZ - mm(model.H, midpoint) * dt
    gain = mm(P, mm(model.HtGinv, innovation))
    return m + (mm(model.A, m) + model.f) * dt + gain


def iterate_kb(model: LinearAffineModel, m0: np.ndarray, P0: np.ndarray,
               obs: ObservationPath, assimilate: bool = True) -> Iterator[Tuple[int, np.ndarray, np.ndarray]]:
    """
    Yields (step, m, P) for step = 0..n_steps.

    With assimilate=False the gain is zero: mean and covariance are
    propagated by the model alone (the no-assimilation baseline).
    """
    if model.mass is not None:
        model = model.explicit()
    m, P = np.asarray(m0, dtype=float), symmetrize(np.asarray(P0, dtype=float))
    yield 0, m, P
    dt = obs.dt
    for n in range(obs.n_steps):
        if assimilate:
            m_next = kb_mean_step(model, m, P, obs.dZ[n], dt)
        else:
            m_next = m + (mm(model.A, m) + model.f) * dt
        try:
            P = riccati_step(model, P, dt, assimilate)
        except NonFiniteState as e:
            raise e.at_step(n + 1) from e
        if not np.all(np.isfinite(m_next)):
            raise NonFiniteState("Kalman-Bucy mean", n + 1)
        m = m_next
        yield n + 1, m, P


def run_kb(model: LinearAffineModel, m0: np.ndarray, P0: np.ndarray, obs: ObservationPath,
           signal: Optional[np.ndarray] = None, assimilate: bool = True,
           log_every: int = 1000) -> KBResult:
    means, rows = [], []
    P = P0
    for n, m, P in iterate_kb(model, m0, P0, obs, assimilate):
        t = n * obs.dt
        trace = float(np.trace(P))
        err = rmse(m, trace, signal[n]) if signal is not None else float("nan")
        means.append(m)
        rows.append((t, trace, float(np.linalg.norm(m)), err))
        if log_every and n % log_every == 0:
            logger.debug(f"[KB] step {n}: trace_P={trace:.4e}")
    return KBResult(
        times=obs.times,
        means=np.array(means),
        final=GaussianState(m=means[-1], P=P),
        diagnostics=np.array(rows),
    )


# ============================================================================
# KALMAN-BUCY PROCESS REALIZATIONS
# ============================================================================

def _as_columns(v: np.ndarray, like: np.ndarray) -> np.ndarray:
    return v if like.ndim == 1 else v[:, None]


def kbp_process_step(model: LinearAffineModel, x: np.ndarray, P: np.ndarray, dZ: np.ndarray,
                     dt: float, dW: np.ndarray, dV: np.ndarray) -> np.ndarray:
    """
    x' = x + (Ax + f)dt + Sigma^(1/2) dW + P H^T Gamma^-1 (dZ - Hx dt - Gamma^(1/2) dV).

    `x` may be a single state (d) or a batch of realizations (d x n); dW and dV
    are the matching Brownian increments (d / k, or d x n / k x n).
    """
    innovation = _as_columns(dZ, x) - mm(model.H, x) * dt - mm(model.Gamma_sqrt, dV)
    out = (x + (mm(model.A, x) + _as_columns(model.f, x)) * dt
           + mm(model.Sigma_sqrt, dW) + mm(P, mm(model.HtGinv, innovation)))
    ensure_finite(out, "Kalman-Bucy process state")
    return out


# ============================================================================
# ENSEMBLE KALMAN FILTER
# ============================================================================

def sample_mean(ensemble: FullEnsemble) -> np.ndarray:
    if ensemble.n_particles < 1:
        raise TooFewParticles("sample mean needs at least one particle")
    return ensemble.particles.mean(axis=1)


def sample_cov(ensemble: FullEnsemble) -> np.ndarray:
    """X* X*^T / (P - 1) with X* the zero-sample-mean particles."""
    n = ensemble.n_particles
    if n < 2:
        raise TooFewParticles(f"sample covariance needs P >= 2, got {n}")
    star = ensemble.particles - ensemble.particles.mean(axis=1, keepdims=True)
    return mm(star, star.T) / (n - 1)


def sample_trace(ensemble: FullEnsemble) -> float:
    """tr of the sample covariance without forming it."""
    n = ensemble.n_particles
    if n < 2:
        return 0.0
    star = ensemble.particles - ensemble.particles.mean(axis=1, keepdims=True)
    return float(np.sum(star * star)) / (n - 1)


def enkf_step(model: LinearAffineModel, ensemble: FullEnsemble, dZ: np.ndarray, dt: float,
              dW: np.ndarray, dV: np.ndarray, covariance: Optional[np.ndarray] = None) -> FullEnsemble:
    """
    One step of the continuous-time EnKF.

    dW (P x d) and dV (P x k) hold the per-particle increments. `covariance`
    replaces the sample covariance (used to recover the exact Kalman-Bucy
    process). With a mass matrix the step is the semi-implicit
    (M - dt A) X' = M X + dt f + M Sigma^(1/2) dW + M P H^T Gamma^-1 innovation.
    """
    X = ensemble.particles
    if dW.shape != (ensemble.n_particles, model.d) or dV.shape != (ensemble.n_particles, model.k):
        raise DimensionMismatch(f"increments {dW.shape}/{dV.shape} do not match "
                                f"{ensemble.n_particles} particles, d={model.d}, k={model.k}")
    P_hat = sample_cov(ensemble) if covariance is None else covariance
    innovation = dZ[:, None] - mm(model.H, X) * dt - mm(model.Gamma_sqrt, dV.T)
    gain_term = mm(P_hat, mm(model.HtGinv, innovation))
    noise = mm(model.Sigma_sqrt, dW.T)
    if model.mass is None:
        X_next = X + (mm(model.A, X) + model.f[:, None]) * dt + noise + gain_term
    else:
        solve = model.semi_implicit_solver(dt)
        rhs = model.apply_mass(X + noise + gain_term) + dt * model.f[:, None]
        X_next = solve(rhs)
    ensure_finite(X_next, "EnKF ensemble")
    return FullEnsemble(X_next)


def iterate_enkf(model: LinearAffineModel, ensemble0: FullEnsemble, obs: ObservationPath,
                 noise_w: ParticleNoise, noise_v: ParticleNoise) -> Iterator[Tuple[int, FullEnsemble]]:
    ensemble = ensemble0
    yield 0, ensemble
    for n in range(obs.n_steps):
        try:
            ensemble = enkf_step(model, ensemble, obs.dZ[n], obs.dt, noise_w.next(), noise_v.next())
        except NonFiniteState as e:
            logger.error(f"[EnKF] catastrophic divergence at step {n + 1}")
            raise e.at_step(n + 1) from e
        yield n + 1, ensemble


def run_enkf(model: LinearAffineModel, ensemble0: FullEnsemble, obs: ObservationPath,
             noise_w: ParticleNoise, noise_v: ParticleNoise,
             signal: Optional[np.ndarray] = None, log_every: int = 1000) -> EnKFResult:
    """Runs the EnKF; the RMSE uses the H-norm whenever the model has a mass matrix."""
    means: List[np.ndarray] = []
    rows = []
    ensemble = ensemble0
    for n, ensemble in iterate_enkf(model, ensemble0, obs, noise_w, noise_v):
        mean = sample_mean(ensemble)
        trace = sample_trace(ensemble)
        err = (ensemble_rmse(ensemble.particles, signal[n], model.mass)
               if signal is not None else float("nan"))
        means.append(mean)
        rows.append((n * obs.dt, trace, float(np.linalg.norm(mean)), err))
        if log_every and n % log_every == 0:
            logger.debug(f"[EnKF] step {n}: rmse={err:.4e}")
    return EnKFResult(times=obs.times, means=np.array(means), final=ensemble,
                      diagnostics=np.array(rows))

