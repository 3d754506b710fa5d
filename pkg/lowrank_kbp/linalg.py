"""
Small dense/sparse linear-algebra helpers shared by every filter.

Matrices handled here are either numpy arrays or scipy.sparse matrices;
the helpers keep products in the cheapest form and never densify a sparse
operand implicitly.
"""

import logging
from contextvars import ContextVar
from typing import Optional, Tuple, Union

import numpy as np
from scipy import sparse

from .errors import NonFiniteState, NotPSD, RankCollapse

logger = logging.getLogger(__name__)

Matrix = Union[np.ndarray, sparse.spmatrix]

PSD_TOLERANCE = 1e-10      # relative to the largest eigenvalue
CLAMP_TOLERANCE = 1e-12    # eigenvalues below this * lambda_max are set to 0
RANK_TOLERANCE = 1e-12     # QR residual column norm below which a rank is lost


def dense(x) -> np.ndarray:
    """Dense copy-free view of a matrix (sparse inputs are expanded)."""
    if sparse.issparse(x):
        return x.toarray()
    return np.asarray(x, dtype=float)


def symmetrize(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


def ensure_finite(x, what: str) -> None:
    data = x.data if sparse.issparse(x) else x
    if not np.all(np.isfinite(data)):
        raise NonFiniteState(what)


def is_diagonal(x) -> bool:
    if sparse.issparse(x):
        coo = x.tocoo()
        return bool(np.all(coo.row[coo.data != 0] == coo.col[coo.data != 0]))
    x = np.asarray(x)
    return bool(np.count_nonzero(x - np.diag(np.diag(x))) == 0)


def symmetric_eigh(x: Matrix, name: str = "matrix") -> Tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix, checking PSD within tolerance."""
    vals, vecs = np.linalg.eigh(dense(x))
    scale = max(float(np.max(np.abs(vals))) if vals.size else 0.0, np.finfo(float).tiny)
    if vals.size and vals[0] < -PSD_TOLERANCE * scale:
        raise NotPSD(f"{name} has eigenvalue {vals[0]:.3e} < -{PSD_TOLERANCE:g}*{scale:.3e}")
    return vals, vecs


def psd_sqrt(x: Matrix, name: str = "matrix") -> Matrix:
    """Symmetric PSD square root; diagonal inputs stay diagonal (and sparse)."""
    if is_diagonal(x):
        diag = np.asarray(x.diagonal() if sparse.issparse(x) else np.diag(x), dtype=float)
        scale = max(float(np.max(np.abs(diag))) if diag.size else 0.0, np.finfo(float).tiny)
        if diag.size and diag.min() < -PSD_TOLERANCE * scale:
            raise NotPSD(f"{name} has diagonal entry {diag.min():.3e} < 0")
        root = np.sqrt(np.clip(diag, 0.0, None))
        return sparse.diags(root, format="csr") if sparse.issparse(x) else np.diag(root)
    vals, vecs = symmetric_eigh(x, name)
    lam_max = vals[-1] if vals.size else 0.0
    vals = np.where(vals < CLAMP_TOLERANCE * lam_max, 0.0, vals)
    root = (vecs * np.sqrt(vals)) @ vecs.T
    return symmetrize(root)


def clamped_psd(P: np.ndarray) -> Tuple[np.ndarray, int]:
    """Project a symmetric matrix onto the PSD cone; returns (matrix, #clamped)."""
    vals, vecs = np.linalg.eigh(symmetrize(P))
    negative = int(np.count_nonzero(vals < 0.0))
    if negative == 0:
        return P, 0
    vals = np.clip(vals, 0.0, None)
    return symmetrize((vecs * vals) @ vecs.T), negative


def orthonormalize(V: np.ndarray, tol: float = RANK_TOLERANCE) -> np.ndarray:
    """Thin QR with the positive-diagonal sign convention on R."""
    Q, Rf = np.linalg.qr(V)
    diag = np.diag(Rf)
    col_norms = np.linalg.norm(V, axis=0)
    lost = np.abs(diag) <= tol * np.maximum(col_norms, 1.0)
    if np.any(lost):
        raise RankCollapse(f"QR lost rank in column(s) {np.flatnonzero(lost).tolist()}")
    count_flops(4 * V.shape[0] * V.shape[1] ** 2)
    return Q * np.where(diag < 0.0, -1.0, 1.0)


# ============================================================================
# OPERATION COUNTING
# ============================================================================

_ACTIVE_COUNTER: ContextVar[Optional["OperationCounter"]] = ContextVar(
    "lowrank_kbp_operation_counter", default=None
)


class OperationCounter:
    """
    Counts floating-point work of the products routed through `mm`.

    Used as a context manager around filter steps:

        with OperationCounter() as ops:
            riccati_step(model, P, dt)
        ops.flops
    """

    def __init__(self):
        self.flops = 0
        self._token = None

    def add(self, flops: int) -> None:
        self.flops += int(flops)

    def __enter__(self) -> "OperationCounter":
        self._token = _ACTIVE_COUNTER.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_COUNTER.reset(self._token)


def count_flops(flops: int) -> None:
    counter = _ACTIVE_COUNTER.get()
    if counter is not None:
        counter.add(flops)


def _product_cost(a, b) -> int:
    ncols = 1 if b.ndim == 1 else b.shape[1]
    nrows = 1 if a.ndim == 1 else a.shape[0]
    if sparse.issparse(a):
        return 2 * a.nnz * ncols
    if sparse.issparse(b):
        return 2 * b.nnz * nrows
    return 2 * nrows * a.shape[-1] * ncols


def mm(a, b):
    """Matrix product a @ b for any dense/sparse mix, counted when a counter is active."""
    if sparse.issparse(b) and not sparse.issparse(a):
        out = b.T @ a if a.ndim == 1 else (b.T @ a.T).T
    else:
        out = a @ b
    if sparse.issparse(out):
        out = out.toarray()
    count_flops(_product_cost(a, b))
    return np.asarray(out)
