"""
model_core - linear-affine models, Gaussian / low-rank initial conditions,
random-stream plumbing and the elementary time-steppers shared by every filter.

A model is the pair of SDEs

    M dX = (A X + f) dt + M Sigma^(1/2) dW        (signal)
      dZ = H X dt + Gamma^(1/2) dV                (observations)

with M the identity unless a finite-element mass matrix is supplied.
"""

import hashlib
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence

import numpy as np
import scipy.linalg as la
from scipy import sparse
from scipy.sparse.linalg import splu

from .errors import (
    DimensionMismatch,
    InvalidGrid,
    NonFiniteState,
    NotPositiveDefinite,
    NotPSD,
    RankExceedsWidth,
    SolveFailed,
)
from .linalg import (
    Matrix,
    dense,
    is_diagonal,
    mm,
    psd_sqrt,
    symmetric_eigh,
    symmetrize,
)

logger = logging.getLogger(__name__)

# ============================================================================
# DATA MODELS
# ============================================================================

@dataclass(frozen=True, eq=False)
class LinearAffineModel:
    """System matrices of a linear-affine model plus the cached factors every filter needs."""
    A: Matrix                 # drift, d x d (1/time)
    f: np.ndarray             # forcing, d (state/time)
    Sigma: Matrix             # model-noise covariance, d x d (state^2/time)
    Sigma_sqrt: Matrix
    H: Matrix                 # observation matrix, k x d
    Gamma: Matrix             # observation-noise covariance, k x k (obs^2/time)
    Gamma_inv: Matrix
    Gamma_sqrt: Matrix
    Gamma_inv_sqrt: Matrix
    S: Matrix                 # H^T Gamma^-1 H
    HtGinv: Matrix            # H^T Gamma^-1, d x k
    mass: Optional[sparse.spmatrix] = None
    _solvers: Dict[float, Callable] = field(default_factory=dict, repr=False, compare=False)
    _solver_lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    @property
    def d(self) -> int:
        return self.A.shape[0]

    @property
    def k(self) -> int:
        return self.H.shape[0]

    @property
    def W(self) -> Optional[sparse.spmatrix]:
        """Inner-product weight of the state space (None = Euclidean)."""
        return self.mass

    @property
    def Sigma_dense(self) -> np.ndarray:
        return dense(self.Sigma)

    def apply_mass(self, x: np.ndarray) -> np.ndarray:
        return x if self.mass is None else mm(self.mass, x)

    def semi_implicit_solver(self, dt: float) -> Callable[[np.ndarray], np.ndarray]:
        """Factor (M - dt A) once per dt and return its solve; safe to call from replicate workers."""
        with self._solver_lock:
            solver = self._solvers.get(dt)
            if solver is None:
                solver = self._factor(dt)
                self._solvers[dt] = solver
        return solver

    def _factor(self, dt: float) -> Callable[[np.ndarray], np.ndarray]:
        mass = self.mass if self.mass is not None else sparse.identity(self.d, format="csc")
        if sparse.issparse(self.A):
            lhs = (sparse.csc_matrix(mass) - dt * sparse.csc_matrix(self.A)).tocsc()
            try:
                lu = splu(lhs)
            except RuntimeError as e:
                raise SolveFailed(f"(M - dt A) is singular for dt={dt}: {e}") from e
            solver = lu.solve
        else:
            lhs = dense(mass) - dt * np.asarray(self.A)
            lu_piv = la.lu_factor(lhs, check_finite=True)
            if np.any(np.diag(lu_piv[0]) == 0.0):
                raise SolveFailed(f"(M - dt A) is singular for dt={dt}")
            solver = lambda rhs: la.lu_solve(lu_piv, rhs)  # noqa: E731
        logger.debug(f"Factored semi-implicit operator for dt={dt}")
        return solver

    def explicit(self) -> "LinearAffineModel":
        """Identity-mass model with the same dynamics (A <- M^-1 A, f <- M^-1 f)."""
        if self.mass is None:
            return self
        lu = splu(sparse.csc_matrix(self.mass))
        A_eff = lu.solve(dense(self.A))
        f_eff = lu.solve(self.f)
        return build_model(A_eff, f_eff, self.Sigma, self.H, self.Gamma)


@dataclass(frozen=True)
class GaussianState:
    m: np.ndarray
    P: np.ndarray


@dataclass(frozen=True)
class LowRankState:
    """X = U0 + U Y with Y ~ N(0, MY); U orthonormal in the model's inner product."""
    U0: np.ndarray
    U: np.ndarray
    MY: np.ndarray
    clamped: int = 0          # negative MY eigenvalues zeroed by the step that produced this state

    @property
    def rank(self) -> int:
        return self.U.shape[1]

    def covariance(self) -> np.ndarray:
        return self.U @ self.MY @ self.U.T


@dataclass(frozen=True)
class ObservationPath:
    dt: float
    dZ: np.ndarray            # n_steps x k increments

    def __post_init__(self):
        if self.dZ.ndim != 2:
            raise DimensionMismatch(f"dZ must be n_steps x k, got shape {self.dZ.shape}")
        if not np.all(np.isfinite(self.dZ)):
            raise NonFiniteState("observation increments")

    @property
    def n_steps(self) -> int:
        return self.dZ.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1)


# ============================================================================
# RANDOM STREAMS
# ============================================================================

def _purpose_key(purpose: str) -> int:
    return int.from_bytes(hashlib.sha256(purpose.encode("utf-8")).digest()[:4], "little")


@dataclass(frozen=True)
class RngPlan:
    """
    Derives one independent stream per (purpose, replicate, particle).

    The derivation only depends on the indices, so the order in which
    replicates or particles are processed never changes the draws.
    """
    master_seed: int

    def seed_sequence(self, purpose: str, replicate: int = 0, particle: int = 0) -> np.random.SeedSequence:
        return np.random.SeedSequence(
            entropy=int(self.master_seed) & (2**64 - 1),
            spawn_key=(_purpose_key(purpose), int(replicate), int(particle)),
        )

    def generator(self, purpose: str, replicate: int = 0, particle: int = 0) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self.seed_sequence(purpose, replicate, particle)))


def brownian_increments(stream: np.random.Generator, dim: int, dt: float, count: int) -> np.ndarray:
    """count x dim i.i.d. N(0, dt) increments."""
    if dt < 0:
        raise ValueError(f"dt must be non-negative, got {dt}")
    return stream.standard_normal((count, dim)) * np.sqrt(dt)


class ParticleNoise:
    """
    Per-particle Brownian increments, one stream per particle.

    Draws are buffered `chunk` steps at a time; since each stream is consumed
    sequentially the values equal those of unbuffered `brownian_increments`.
    """

    def __init__(self, generators: Sequence[np.random.Generator], dim: int, dt: float, chunk: int = 64):
        self.generators = list(generators)
        self.dim = dim
        self.dt = dt
        self.chunk = max(1, int(chunk))
        self._buffer = np.empty((0, len(self.generators), dim))
        self._cursor = 0

    @classmethod
    def from_plan(cls, plan: RngPlan, purpose: str, replicate: int, n_particles: int,
                  dim: int, dt: float, chunk: int = 64) -> "ParticleNoise":
        gens = [plan.generator(purpose, replicate, p) for p in range(n_particles)]
        return cls(gens, dim, dt, chunk)

    @property
    def n_particles(self) -> int:
        return len(self.generators)

    def _refill(self) -> None:
        buf = np.empty((self.chunk, self.n_particles, self.dim))
        for p, gen in enumerate(self.generators):
            buf[:, p, :] = brownian_increments(gen, self.dim, self.dt, self.chunk)
        self._buffer = buf
        self._cursor = 0

    def next(self) -> np.ndarray:
        """Increments of the next step, n_particles x dim."""
        if self._cursor >= self._buffer.shape[0]:
            self._refill()
        out = self._buffer[self._cursor]
        self._cursor += 1
        return out


# ============================================================================
# MODEL BUILDERS
# ============================================================================

def _as_matrix(x, name: str) -> Matrix:
    if sparse.issparse(x):
        return sparse.csr_matrix(x, dtype=float)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return x


def _diag_to_sparse(x: Matrix) -> Matrix:
    if is_diagonal(x):
        diag = x.diagonal() if sparse.issparse(x) else np.diag(x)
        return sparse.diags(np.asarray(diag, dtype=float), format="csr")
    return x


def _check_symmetric(x: Matrix, name: str, rel: float = 1e-12) -> None:
    if sparse.issparse(x):
        diff = abs(x - x.T).max() if x.nnz else 0.0
        scale = abs(x).max() if x.nnz else 0.0
    else:
        diff = np.max(np.abs(x - x.T)) if x.size else 0.0
        scale = np.max(np.abs(x)) if x.size else 0.0
    if diff > rel * max(scale, np.finfo(float).tiny):
        raise NotPSD(f"{name} is not symmetric (max asymmetry {diff:.3e})")


def build_model(A, f, Sigma, H, Gamma, mass=None) -> LinearAffineModel:
    """Validate system matrices and cache Sigma^(1/2), Gamma^(+-1/2), Gamma^-1 and S."""
    A = _as_matrix(A, "A")
    d = A.shape[0]
    if A.shape != (d, d):
        raise DimensionMismatch(f"A must be square, got {A.shape}")
    f = np.asarray(f, dtype=float).reshape(-1)
    if f.shape != (d,):
        raise DimensionMismatch(f"f has length {f.shape[0]}, expected {d}")
    Sigma = _diag_to_sparse(_as_matrix(Sigma, "Sigma"))
    if Sigma.shape != (d, d):
        raise DimensionMismatch(f"Sigma has shape {Sigma.shape}, expected {(d, d)}")
    H = _as_matrix(H, "H")
    if H.shape[1] != d:
        raise DimensionMismatch(f"H has {H.shape[1]} columns, expected {d}")
    k = H.shape[0]
    Gamma = _diag_to_sparse(_as_matrix(Gamma, "Gamma"))
    if Gamma.shape != (k, k):
        raise DimensionMismatch(f"Gamma has shape {Gamma.shape}, expected {(k, k)}")
    if mass is not None:
        mass = sparse.csr_matrix(mass, dtype=float)
        if mass.shape != (d, d):
            raise DimensionMismatch(f"mass matrix has shape {mass.shape}, expected {(d, d)}")

    _check_symmetric(Sigma, "Sigma")
    _check_symmetric(Gamma, "Gamma", rel=1e-10)

    if sparse.issparse(Gamma):
        diag = Gamma.diagonal()
        if np.any(diag <= 0.0):
            raise NotPositiveDefinite(f"Gamma has non-positive diagonal entry {diag.min():.3e}")
        Gamma_inv = sparse.diags(1.0 / diag, format="csr")
        Gamma_sqrt = sparse.diags(np.sqrt(diag), format="csr")
        Gamma_inv_sqrt = sparse.diags(1.0 / np.sqrt(diag), format="csr")
    else:
        try:
            np.linalg.cholesky(Gamma)
        except np.linalg.LinAlgError as e:
            raise NotPositiveDefinite(f"Gamma is not positive definite: {e}") from e
        vals, vecs = np.linalg.eigh(Gamma)
        if vals[0] <= 0.0:
            raise NotPositiveDefinite(f"Gamma has eigenvalue {vals[0]:.3e}")
        Gamma_inv = symmetrize((vecs / vals) @ vecs.T)
        Gamma_sqrt = symmetrize((vecs * np.sqrt(vals)) @ vecs.T)
        Gamma_inv_sqrt = symmetrize((vecs / np.sqrt(vals)) @ vecs.T)

    Sigma_sqrt = psd_sqrt(Sigma, "Sigma")

    if sparse.issparse(H) and sparse.issparse(Gamma_inv):
        HtGinv = sparse.csr_matrix(H.T @ Gamma_inv)
        S = sparse.csr_matrix(HtGinv @ H)
    else:
        HtGinv = mm(dense(H).T, Gamma_inv)
        S = symmetrize(mm(HtGinv, H))

    logger.debug(f"Built model d={d}, k={k}, mass={'yes' if mass is not None else 'no'}")
    return LinearAffineModel(
        A=A, f=f, Sigma=Sigma, Sigma_sqrt=Sigma_sqrt, H=H, Gamma=Gamma,
        Gamma_inv=Gamma_inv, Gamma_sqrt=Gamma_sqrt, Gamma_inv_sqrt=Gamma_inv_sqrt,
        S=S, HtGinv=HtGinv, mass=mass,
    )


def upwind_grid(d: int, L: float) -> np.ndarray:
    return np.arange(d) * (L / d)


def build_upwind_model(d: int, L: float, decay: float, forcing: float,
                       sigma: float, gamma: float) -> LinearAffineModel:
    """Periodic upwind discretization of -d/dx - decay with full observations."""
    if d < 2 or L <= 0:
        raise InvalidGrid(f"upwind grid needs d >= 2 and L > 0, got d={d}, L={L}")
    h = L / d
    rows = np.concatenate([np.arange(d), np.arange(d)])
    cols = np.concatenate([np.arange(d), (np.arange(d) - 1) % d])
    vals = np.concatenate([np.full(d, -1.0 / h - decay), np.full(d, 1.0 / h)])
    A = sparse.coo_matrix((vals, (rows, cols)), shape=(d, d)).tocsr()
    return build_model(
        A=A,
        f=np.full(d, float(forcing)),
        Sigma=sparse.identity(d, format="csr") * float(sigma),
        H=sparse.identity(d, format="csr"),
        Gamma=sparse.identity(d, format="csr") * float(gamma),
    )


# ============================================================================
# INITIAL CONDITIONS
# ============================================================================

def sample_gaussian(cov: np.ndarray, rng: np.random.Generator, size: int) -> np.ndarray:
    """size x n draws of N(0, cov); Cholesky when PD, clamped eigendecomposition otherwise."""
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    n = cov.shape[0]
    try:
        factor = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        vals, vecs = symmetric_eigh(cov, "covariance")
        factor = vecs * np.sqrt(np.clip(vals, 0.0, None))
    z = rng.standard_normal((size, n))
    return z @ factor.T


def sample_low_rank_ic(U0: np.ndarray, U: np.ndarray, MY: np.ndarray,
                       stream: np.random.Generator, size: Optional[int] = None) -> np.ndarray:
    """U0 + U y with y ~ N(0, MY); a d x size block of columns when size is given."""
    y = sample_gaussian(MY, stream, 1 if size is None else size)
    if size is None:
        return U0 + U @ y[0]
    return U0[:, None] + U @ y.T


def low_rank_ic_from_modes(mean: np.ndarray, raw_modes: np.ndarray, coefficients: np.ndarray,
                           W: Optional[Matrix] = None) -> LowRankState:
    """
    Gaussian X0 = mean + sum_k c_k v_k xi_k rewritten with W-orthonormal modes.

    Uses two passes of Cholesky-QR so that U^T W U = I to roundoff; the
    returned MY reproduces the covariance sum_k c_k^2 v_k v_k^T exactly.
    """
    V = np.asarray(raw_modes, dtype=float)
    T = np.eye(V.shape[1])
    Q = V
    for _ in range(2):
        WQ = Q if W is None else mm(W, Q)
        gram = symmetrize(Q.T @ WQ)
        try:
            L = np.linalg.cholesky(gram)
        except np.linalg.LinAlgError as e:
            raise NotPSD(f"initial-condition modes are linearly dependent: {e}") from e
        Q = la.solve_triangular(L, Q.T, lower=True).T
        T = L.T @ T
    c = np.asarray(coefficients, dtype=float)
    MY = symmetrize((T * c**2) @ T.T)
    return LowRankState(U0=np.asarray(mean, dtype=float).copy(), U=Q, MY=MY)


def advection_initial_condition(d: int, L: float, rank: int) -> LowRankState:
    """u0 = sin(2 pi x / L) + sum_k (1/k) sin(2 pi x k / L) xi_k on the upwind grid."""
    x = upwind_grid(d, L)
    k = np.arange(1, rank + 1)
    raw = np.sin(2.0 * np.pi * np.outer(x, k) / L)
    return low_rank_ic_from_modes(np.sin(2.0 * np.pi * x / L), raw, 1.0 / k)


def truncate_low_rank(state: LowRankState, R: int) -> LowRankState:
    """Best rank-R truncation of the initial covariance (keeps the R largest eigen-directions of MY)."""
    if R > state.rank:
        raise RankExceedsWidth(f"cannot truncate rank-{state.rank} state to rank {R}")
    vals, vecs = np.linalg.eigh(symmetrize(state.MY))
    order = np.argsort(vals)[::-1][:R]
    return LowRankState(
        U0=state.U0.copy(),
        U=state.U @ vecs[:, order],
        MY=np.diag(np.clip(vals[order], 0.0, None)),
    )


# ============================================================================
# SIGNAL AND OBSERVATIONS
# ============================================================================

def simulate_signal(model: LinearAffineModel, x0: np.ndarray, dt: float, n_steps: int,
                    stream: np.random.Generator) -> np.ndarray:
    """Euler-Maruyama (semi-implicit when a mass matrix is present); (n_steps+1) x d."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    d = model.d
    dW = brownian_increments(stream, d, dt, n_steps)
    noise = mm(model.Sigma_sqrt, dW.T).T
    out = np.empty((n_steps + 1, d))
    out[0] = x0
    x = np.asarray(x0, dtype=float)
    solve = model.semi_implicit_solver(dt) if model.mass is not None else None
    for n in range(n_steps):
        if solve is None:
            x = x + (mm(model.A, x) + model.f) * dt + noise[n]
        else:
            x = solve(model.apply_mass(x) + dt * model.f + model.apply_mass(noise[n]))
        if not np.all(np.isfinite(x)):
            raise NonFiniteState("signal", n + 1)
        out[n + 1] = x
    return out


def simulate_observations(model: LinearAffineModel, signal: np.ndarray, dt: float,
                          stream: np.random.Generator) -> ObservationPath:
    """dZ_n = H x_n dt + Gamma^(1/2) dV_n for n = 0..N-1 (Z_0 = 0)."""
    if signal.ndim != 2 or signal.shape[1] != model.d:
        raise DimensionMismatch(f"signal must be (n+1) x {model.d}, got {signal.shape}")
    n_steps = signal.shape[0] - 1
    dV = brownian_increments(stream, model.k, dt, n_steps)
    drift = mm(model.H, signal[:-1].T).T * dt
    noise = mm(model.Gamma_sqrt, dV.T).T
    return ObservationPath(dt=dt, dZ=drift + noise)
