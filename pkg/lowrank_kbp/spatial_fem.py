"""
Q1 finite elements for the 2-D advection-diffusion pollution model on [0,1]^2.

Periodic in x1 (nodes at x1 = 0 and x1 = 1 are identified), homogeneous
Neumann on x2 = 0 and x2 = 1 (natural, no constraint). The assembled system

    M dX = A X dt + sigma^(1/2) M dW

has A = -a K + C, with K the stiffness and C the advection matrix.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .errors import AssemblyFailure, EmptySquare, InvalidGrid
from .linalg import Matrix, mm, symmetrize
from .model_core import (
    LinearAffineModel,
    LowRankState,
    brownian_increments,
    build_model,
    low_rank_ic_from_modes,
)
from .serialization import write_matrix_market, write_trajectory_csv

logger = logging.getLogger(__name__)

DEFAULT_NODES = 21
DEFAULT_DIFFUSION = 1e-1
DEFAULT_VELOCITY = (1.0, 0.0)
DEFAULT_SIGMA = 1e-5
DEFAULT_GAMMA = 1e-2
DEFAULT_SQUARE_SIDE = 0.12
FEM_TRUE_RANK = 12

Square = Tuple[float, float, float, float]          # (x1_min, x1_max, x2_min, x2_max)

# 2x2 Gauss rule on the unit reference square
_GAUSS_1D = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])
_GAUSS_POINTS = np.array([(xi, eta) for eta in _GAUSS_1D for xi in _GAUSS_1D])
_GAUSS_WEIGHTS = np.full(4, 0.25)

# local node order: (0,0), (1,0), (1,1), (0,1)
_LOCAL_X = np.array([0.0, 1.0, 1.0, 0.0])
_LOCAL_Y = np.array([0.0, 0.0, 1.0, 1.0])


# ============================================================================
# DATA MODELS
# ============================================================================

@dataclass(frozen=True)
class QuadMesh:
    nx: int
    ny: int
    coords: np.ndarray            # n_dofs x 2, coordinates of the free nodes
    elements: np.ndarray          # n_elements x 4 dof indices, counter-clockwise
    element_origin: np.ndarray    # n_elements x 2 lower-left corners
    element_size: np.ndarray      # n_elements x 2 (hx, hy)
    node_to_dof: np.ndarray       # nx*ny grid node -> dof (periodic identification in x1)
    neumann: np.ndarray           # n_dofs bool, dof lies on x2 = 0 or x2 = 1

    @property
    def n_dofs(self) -> int:
        return self.coords.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]


@dataclass(frozen=True)
class FemOperators:
    M: sparse.csr_matrix
    A: sparse.csr_matrix
    a: float
    b: Tuple[float, float]
    H_part: Optional[sparse.csr_matrix] = None
    squares: List[Square] = field(default_factory=list)


# ============================================================================
# MESH
# ============================================================================

def build_mesh(nx: int = DEFAULT_NODES, ny: int = DEFAULT_NODES) -> QuadMesh:
    """Structured nx x ny node grid on [0,1]^2 with x1 = 0 glued to x1 = 1."""
    if nx < 3 or ny < 3:
        raise InvalidGrid(f"mesh needs at least 3 nodes per direction, got {nx} x {ny}")
    n_free_x = nx - 1
    x = np.linspace(0.0, 1.0, nx)
    y = np.linspace(0.0, 1.0, ny)

    i, j = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    node_to_dof = ((i % n_free_x) + n_free_x * j).ravel(order="F")

    fi, fj = np.meshgrid(np.arange(n_free_x), np.arange(ny), indexing="ij")
    fi, fj = fi.ravel(order="F"), fj.ravel(order="F")
    coords = np.column_stack([x[fi], y[fj]])
    neumann = (fj == 0) | (fj == ny - 1)

    ei, ej = np.meshgrid(np.arange(nx - 1), np.arange(ny - 1), indexing="ij")
    ei, ej = ei.ravel(order="F"), ej.ravel(order="F")

    def dof(ii, jj):
        return (ii % n_free_x) + n_free_x * jj

    elements = np.column_stack([dof(ei, ej), dof(ei + 1, ej), dof(ei + 1, ej + 1), dof(ei, ej + 1)])
    origin = np.column_stack([x[ei], y[ej]])
    size = np.column_stack([x[ei + 1] - x[ei], y[ej + 1] - y[ej]])
    logger.debug(f"Built {nx}x{ny} mesh: {coords.shape[0]} dofs, {elements.shape[0]} elements")
    return QuadMesh(nx=nx, ny=ny, coords=coords, elements=elements, element_origin=origin,
                    element_size=size, node_to_dof=node_to_dof, neumann=neumann)


# ============================================================================
# ASSEMBLY
# ============================================================================

def _shape_functions(xi: np.ndarray, eta: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Bilinear shape values and reference gradients at points; each (n_points, 4)."""
    sx = np.where(_LOCAL_X == 1.0, xi[:, None], 1.0 - xi[:, None])
    sy = np.where(_LOCAL_Y == 1.0, eta[:, None], 1.0 - eta[:, None])
    dsx = np.where(_LOCAL_X == 1.0, 1.0, -1.0)[None, :]
    dsy = np.where(_LOCAL_Y == 1.0, 1.0, -1.0)[None, :]
    return sx * sy, dsx * sy, sx * dsy


def _coo_assemble(elements: np.ndarray, local: np.ndarray, n: int) -> sparse.csr_matrix:
    """Scatter per-element 4x4 blocks (n_elements x 4 x 4) into an n x n matrix."""
    rows = np.repeat(elements, 4, axis=1).ravel()
    cols = np.tile(elements, (1, 4)).ravel()
    return sparse.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def assemble_operators(mesh: QuadMesh, a: float = DEFAULT_DIFFUSION,
                       b: Sequence[float] = DEFAULT_VELOCITY) -> FemOperators:
    """Mass matrix and A = -a K + C with 2x2 Gauss quadrature per element."""
    if a <= 0:
        raise AssemblyFailure(f"diffusion coefficient must be positive, got {a}")
    hx, hy = mesh.element_size[:, 0], mesh.element_size[:, 1]
    area = hx * hy
    if np.any(~np.isfinite(area)) or np.any(area <= 0.0):
        raise AssemblyFailure("degenerate element (non-positive area)")

    N, dN_dxi, dN_deta = _shape_functions(_GAUSS_POINTS[:, 0], _GAUSS_POINTS[:, 1])
    w = _GAUSS_WEIGHTS
    mass_ref = np.einsum("q,qa,qb->ab", w, N, N)
    xx_ref = np.einsum("q,qa,qb->ab", w, dN_dxi, dN_dxi)
    yy_ref = np.einsum("q,qa,qb->ab", w, dN_deta, dN_deta)
    adv_x_ref = np.einsum("q,qa,qb->ab", w, N, dN_dxi)
    adv_y_ref = np.einsum("q,qa,qb->ab", w, N, dN_deta)

    b1, b2 = float(b[0]), float(b[1])
    Me = area[:, None, None] * mass_ref
    Ke = (hy / hx)[:, None, None] * xx_ref + (hx / hy)[:, None, None] * yy_ref
    Ce = b1 * hy[:, None, None] * adv_x_ref + b2 * hx[:, None, None] * adv_y_ref

    n = mesh.n_dofs
    M = _coo_assemble(mesh.elements, Me, n)
    M = sparse.csr_matrix(0.5 * (M + M.T))
    K = _coo_assemble(mesh.elements, Ke, n)
    C = _coo_assemble(mesh.elements, Ce, n)
    A = (-a * K + C).tocsr()
    if not np.all(np.isfinite(A.data)) or not np.all(np.isfinite(M.data)):
        raise AssemblyFailure("non-finite entries in assembled operators")
    logger.info(f"Assembled FEM operators: d={n}, nnz(M)={M.nnz}, nnz(A)={A.nnz}")
    return FemOperators(M=M, A=A, a=float(a), b=(b1, b2))


def default_squares(n_per_side: int = 5, side: float = DEFAULT_SQUARE_SIDE) -> List[Square]:
    """n x n axis-aligned squares centered at ((2i+1)/(2n), (2j+1)/(2n))."""
    half = side / 2.0
    centers = (2 * np.arange(n_per_side) + 1) / (2.0 * n_per_side)
    return [(float(cx - half), float(cx + half), float(cy - half), float(cy + half))
            for cy in centers for cx in centers]


def assemble_partial_observation(mesh: QuadMesh, squares: Sequence[Square]) -> sparse.csr_matrix:
    """H(l, j) = integral of phi_j over square l, by Gauss quadrature on clipped sub-cells."""
    x0e, y0e = mesh.element_origin[:, 0], mesh.element_origin[:, 1]
    hx, hy = mesh.element_size[:, 0], mesh.element_size[:, 1]
    rows, cols, vals = [], [], []
    for ell, (sx0, sx1, sy0, sy1) in enumerate(squares):
        lo_x, hi_x = np.maximum(x0e, sx0), np.minimum(x0e + hx, sx1)
        lo_y, hi_y = np.maximum(y0e, sy0), np.minimum(y0e + hy, sy1)
        hit = np.flatnonzero((hi_x > lo_x) & (hi_y > lo_y))
        if hit.size == 0:
            raise EmptySquare(f"square {ell} {(sx0, sx1, sy0, sy1)} intersects no element")
        for e in hit:
            wx, wy = hi_x[e] - lo_x[e], hi_y[e] - lo_y[e]
            px = (lo_x[e] + wx * _GAUSS_POINTS[:, 0] - x0e[e]) / hx[e]
            py = (lo_y[e] + wy * _GAUSS_POINTS[:, 1] - y0e[e]) / hy[e]
            N, _, _ = _shape_functions(px, py)
            local = wx * wy * (_GAUSS_WEIGHTS @ N)
            rows.extend([ell] * 4)
            cols.extend(mesh.elements[e].tolist())
            vals.extend(local.tolist())
    H = sparse.coo_matrix((vals, (rows, cols)), shape=(len(squares), mesh.n_dofs)).tocsr()
    logger.debug(f"Assembled partial observation operator: k={H.shape[0]}")
    return H


# ============================================================================
# NORMS / NOISE
# ============================================================================

def h_norm(M: Matrix, x: np.ndarray) -> float:
    """sqrt(x^T M x), the L2(D) norm of the finite-element function with dofs x."""
    return float(np.sqrt(max(float(x @ mm(M, x)), 0.0)))


def qwiener_increment(M: Matrix, stream: np.random.Generator, dt: float) -> np.ndarray:
    """M dW with per-node i.i.d. N(0, dt) increments dW."""
    dW = brownian_increments(stream, M.shape[0], dt, 1)[0]
    return mm(M, dW)


# ============================================================================
# MODEL / INITIAL CONDITION
# ============================================================================

def build_fem_model(mesh: QuadMesh, operators: FemOperators, observation: str = "full",
                    sigma: float = DEFAULT_SIGMA, gamma: float = DEFAULT_GAMMA,
                    squares: Optional[Sequence[Square]] = None) -> Tuple[LinearAffineModel, FemOperators]:
    """
    The pollution model with full or partial observations.

    Full observations measure the field itself in L2(D): H = I on the dofs and
    Gamma = gamma M^-1, so the gain is P M / gamma. Partial observations
    integrate the field over the squares, with Gamma = gamma I.
    """
    d = mesh.n_dofs
    M = operators.M
    if observation == "full":
        M_inv = splu(sparse.csc_matrix(M)).solve(np.eye(d))
        H, Gamma = sparse.identity(d, format="csr"), gamma * symmetrize(M_inv)
    elif observation == "partial":
        squares = list(squares) if squares is not None else default_squares()
        H_part = assemble_partial_observation(mesh, squares)
        operators = FemOperators(M=M, A=operators.A, a=operators.a, b=operators.b,
                                 H_part=H_part, squares=squares)
        H, Gamma = H_part, sparse.identity(len(squares), format="csr") * gamma
    else:
        raise InvalidGrid(f"unknown observation mode '{observation}' (expected full|partial)")
    model = build_model(A=operators.A, f=np.zeros(d), Sigma=sparse.identity(d, format="csr") * sigma,
                        H=H, Gamma=Gamma, mass=M)
    return model, operators


def fem_initial_condition(mesh: QuadMesh, M: Matrix, rank: int = FEM_TRUE_RANK) -> LowRankState:
    """u0 = exp(-(x1-1/2)^2 - (x2-1/2)^2) + sum_i i^-2 sin(i pi x1) cos(i pi x2) xi_i, M-orthonormal modes."""
    x1, x2 = mesh.coords[:, 0], mesh.coords[:, 1]
    mean = np.exp(-(x1 - 0.5) ** 2 - (x2 - 0.5) ** 2)
    i = np.arange(1, rank + 1)
    raw = np.sin(np.pi * np.outer(x1, i)) * np.cos(np.pi * np.outer(x2, i))
    return low_rank_ic_from_modes(mean, raw, 1.0 / i**2, W=M)


def export_fem(directory, mesh: QuadMesh, operators: FemOperators) -> List[Path]:
    """Matrix-market export of M, A (and H_part) plus the dof coordinates."""
    directory = Path(directory)
    written = [
        write_matrix_market(directory / "mass.mtx", operators.M, "FEM mass matrix"),
        write_matrix_market(directory / "drift.mtx", operators.A, "FEM drift -aK + C"),
        write_trajectory_csv(directory / "dof_coords.csv", np.arange(mesh.n_dofs), mesh.coords, prefix="x"),
    ]
    if operators.H_part is not None:
        written.append(write_matrix_market(directory / "observation.mtx", operators.H_part,
                                           "indicator-square observation operator"))
    return written
