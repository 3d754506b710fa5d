"""
Error metrics, Gaussian distances, low-rank baselines and study aggregation.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from .errors import DimensionMismatch, MismatchedEnsembles, NonPositiveData
from .linalg import Matrix, mm, psd_sqrt, symmetrize
from .serialization import write_csv

logger = logging.getLogger(__name__)

STUDY_HEADER = ["x", "mean", "std", "n_replicates"]
MIN_SLOPE_POINTS = 4


def _sq_norms(D: np.ndarray, W: Optional[Matrix] = None) -> np.ndarray:
    """Squared (W-weighted) norms of the columns of D."""
    if W is None:
        return np.sum(D * D, axis=0)
    return np.sum(D * mm(W, D), axis=0)


# ============================================================================
# POINTWISE ERRORS
# ============================================================================

def rmse(m: np.ndarray, P_or_trace, x_signal: np.ndarray) -> float:
    """sqrt(||m - x||^2 + tr P)."""
    trace = float(P_or_trace) if np.ndim(P_or_trace) == 0 else float(np.trace(P_or_trace))
    diff = np.asarray(m) - np.asarray(x_signal)
    return math.sqrt(max(float(diff @ diff) + trace, 0.0))


def irmse(series: Sequence[float], dt: float, T: float) -> float:
    """Time-integrated RMSE, (dt / T) * sum_i rmse(t_i)."""
    return float(dt / T * np.sum(series))


def ensemble_rmse(particles: np.ndarray, x_signal: np.ndarray, W: Optional[Matrix] = None) -> float:
    """Root of the particle-averaged squared error; H-norm when the mass matrix W is given."""
    particles = np.atleast_2d(particles)
    D = particles - np.asarray(x_signal)[:, None]
    return math.sqrt(float(np.mean(_sq_norms(D, W))))


def ell2p_distance(ens_a: np.ndarray, ens_b: np.ndarray, W: Optional[Matrix] = None) -> float:
    """l2_P(H) distance between matched particles of two d x P ensembles."""
    if ens_a.shape != ens_b.shape:
        raise MismatchedEnsembles(f"ensembles have shapes {ens_a.shape} and {ens_b.shape}")
    return math.sqrt(float(np.mean(_sq_norms(ens_a - ens_b, W))))


# ============================================================================
# GAUSSIAN DISTANCES / LOW-RANK BASELINES
# ============================================================================

def gaussian_w2(m1: np.ndarray, P1: np.ndarray, m2: np.ndarray, P2: np.ndarray) -> float:
    """2-Wasserstein distance between N(m1, P1) and N(m2, P2)."""
    root1 = psd_sqrt(np.atleast_2d(P1), "P1")
    inner = symmetrize(root1 @ np.atleast_2d(P2) @ root1)
    cross = psd_sqrt(inner, "P1^(1/2) P2 P1^(1/2)")
    bures = float(np.trace(P1) + np.trace(P2) - 2.0 * np.trace(cross))
    diff = np.atleast_1d(m1) - np.atleast_1d(m2)
    return math.sqrt(float(diff @ diff) + max(bures, 0.0))


def best_rank_error(P: np.ndarray, R: int) -> float:
    """||P - T_R(P)||_F of the best rank-R approximation of a symmetric matrix."""
    vals = np.sort(np.abs(np.linalg.eigvalsh(symmetrize(np.asarray(P)))))[::-1]
    return math.sqrt(float(np.sum(vals[R:] ** 2)))


def ensemble_singular_values(particles: np.ndarray, W: Optional[Matrix] = None) -> np.ndarray:
    """Singular values of the zero-mean part of a d x P ensemble in the W inner product."""
    star = particles - particles.mean(axis=1, keepdims=True)
    if W is not None:
        L = np.linalg.cholesky(W.toarray() if hasattr(W, "toarray") else np.asarray(W))
        star = L.T @ star
    return np.linalg.svd(star, compute_uv=False)


def best_rank_ensemble_error(particles: np.ndarray, R: int, W: Optional[Matrix] = None,
                             singular_values: Optional[np.ndarray] = None) -> float:
    """
    l2_P(H) distance between an ensemble and its sample mean plus the best
    rank-R truncation of its zero-mean part.
    """
    sv = singular_values if singular_values is not None else ensemble_singular_values(particles, W)
    return math.sqrt(float(np.sum(sv[R:] ** 2)) / particles.shape[1])


def subspace_distance(U: np.ndarray, V: np.ndarray, W: Optional[Matrix] = None) -> float:
    """||sin Theta||_2 between the ranges of two W-orthonormal bases."""
    if U.shape != V.shape:
        raise DimensionMismatch(f"bases have shapes {U.shape} and {V.shape}")
    WV = V if W is None else mm(W, V)
    residual = V - U @ (U.T @ WV)
    gram = residual.T @ (residual if W is None else mm(W, residual))
    top = float(np.linalg.eigvalsh(symmetrize(gram))[-1])
    return min(math.sqrt(max(top, 0.0)), 1.0)


# ============================================================================
# SLOPE FITS
# ============================================================================

def fit_loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> Tuple[float, float]:
    """Least-squares slope of log y against log x, with a 2-standard-error half-width."""
    xs, ys = np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)
    if xs.shape != ys.shape or xs.size < MIN_SLOPE_POINTS:
        raise DimensionMismatch(f"need at least {MIN_SLOPE_POINTS} matched points, got {xs.size}/{ys.size}")
    if np.any(xs <= 0) or np.any(ys <= 0):
        raise NonPositiveData("log-log regression needs strictly positive data")
    fit = stats.linregress(np.log(xs), np.log(ys))
    return float(fit.slope), 2.0 * float(fit.stderr)


# ============================================================================
# STUDIES
# ============================================================================

@dataclass
class StudyResult:
    metric: str
    grid: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    n_replicates: np.ndarray
    slope: Optional[float] = None
    slope_half_width: Optional[float] = None

    def to_csv(self, path) -> None:
        write_csv(path, STUDY_HEADER, np.column_stack([self.grid, self.mean, self.std, self.n_replicates]))

    def summary(self) -> Dict:
        out = {"metric": self.metric, "grid": self.grid.tolist(), "mean": self.mean.tolist(),
               "std": [None if math.isnan(s) else s for s in self.std.tolist()],
               "n_replicates": self.n_replicates.astype(int).tolist()}
        if self.slope is not None:
            out["slope"] = self.slope
            out["slope_half_width"] = self.slope_half_width
        return out

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2)


@dataclass
class StudyAccumulator:
    """
    Collects one value per (grid point, replicate).

    Values are reduced in (grid, replicate) order at the end, so the
    aggregate does not depend on the order replicates finish.
    """
    metric: str
    values: Dict[float, Dict[int, float]] = field(default_factory=dict)

    def add(self, x: float, replicate: int, value: float) -> None:
        self.values.setdefault(float(x), {})[int(replicate)] = float(value)

    def merge(self, other: "StudyAccumulator") -> None:
        for x, per_rep in other.values.items():
            for r, v in per_rep.items():
                self.add(x, r, v)

    def result(self, fit_slope: bool = False) -> StudyResult:
        grid = np.array(sorted(self.values))
        means, stds, counts = [], [], []
        for x in grid:
            per_rep = self.values[float(x)]
            vals = np.array([per_rep[r] for r in sorted(per_rep)])
            means.append(float(np.mean(vals)))
            stds.append(float(np.std(vals, ddof=1)) if vals.size >= 2 else float("nan"))
            counts.append(vals.size)
        result = StudyResult(self.metric, grid, np.array(means), np.array(stds), np.array(counts))
        if fit_slope and grid.size >= MIN_SLOPE_POINTS:
            result.slope, result.slope_half_width = fit_loglog_slope(grid, result.mean)
            logger.info(f"[Study] {self.metric}: log-log slope {result.slope:.3f} +- {result.slope_half_width:.3f}")
        return result

