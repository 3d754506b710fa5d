"""
Readers and writers for trajectories, observation paths and mode snapshots.

  CSV     header row `t,x_0,...` (or `t,dZ_0,...`), round-trip decimal format
  LRKB    little-endian float64 row-major block behind a 16-byte header:
          magic b'LRKB', version u32, rows u32, cols u32
  MTX     matrix-market text export of sparse operators (scipy.io)
"""

import logging
import struct
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
from scipy import io as spio
from scipy import sparse

from .errors import DimensionMismatch, SchemaMismatch

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

LRKB_MAGIC = b"LRKB"
LRKB_VERSION = 1
_HEADER = struct.Struct("<4sIII")
_FLOAT_FORMAT = "%.17g"


# ============================================================================
# CSV
# ============================================================================

def write_csv(path: PathLike, header: Sequence[str], rows: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    if rows.size and rows.shape[1] != len(header):
        raise DimensionMismatch(f"{path.name}: {len(header)} columns in header, {rows.shape[1]} in data")
    np.savetxt(path, rows, delimiter=",", header=",".join(header), comments="", fmt=_FLOAT_FORMAT)
    return path


def read_csv(path: PathLike) -> Tuple[List[str], np.ndarray]:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return header, data


def write_trajectory_csv(path: PathLike, times: np.ndarray, states: np.ndarray, prefix: str = "x") -> Path:
    """One row per time: t, x_0 .. x_{d-1}."""
    states = np.atleast_2d(states)
    if states.shape[0] != len(times):
        raise DimensionMismatch(f"{len(times)} times but {states.shape[0]} states")
    header = ["t"] + [f"{prefix}_{i}" for i in range(states.shape[1])]
    return write_csv(path, header, np.column_stack([times, states]))


def write_observation_csv(path: PathLike, obs) -> Path:
    """Increments are stamped with the left end of their interval."""
    return write_trajectory_csv(path, obs.times[:-1], obs.dZ, prefix="dZ")


def read_trajectory_csv(path: PathLike) -> Tuple[np.ndarray, np.ndarray]:
    header, data = read_csv(path)
    if not header or header[0] != "t":
        raise SchemaMismatch(f"{path}: first column must be 't', got {header[:1]}")
    return data[:, 0], data[:, 1:]


# ============================================================================
# LRKB BINARY CONTAINER
# ============================================================================

def write_lrkb(path: PathLike, matrix: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    matrix = np.atleast_2d(np.asarray(matrix, dtype="<f8"))
    rows, cols = matrix.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(LRKB_MAGIC, LRKB_VERSION, rows, cols))
        fh.write(np.ascontiguousarray(matrix).tobytes(order="C"))
    return path


def read_lrkb(path: PathLike) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise SchemaMismatch(f"{path}: truncated LRKB header")
    magic, version, rows, cols = _HEADER.unpack_from(raw)
    if magic != LRKB_MAGIC:
        raise SchemaMismatch(f"{path}: bad magic {magic!r}")
    if version != LRKB_VERSION:
        raise SchemaMismatch(f"{path}: unsupported LRKB version {version}")
    payload = raw[_HEADER.size:]
    if len(payload) != 8 * rows * cols:
        raise SchemaMismatch(f"{path}: expected {rows}x{cols} float64 payload, got {len(payload)} bytes")
    return np.frombuffer(payload, dtype="<f8").reshape(rows, cols).copy()


def write_lowrank_snapshot(directory: PathLike, step: int, **factors: np.ndarray) -> None:
    """Writes each factor (U0, U, MY, Yhat...) as <name>_<step>.lrkb."""
    directory = Path(directory)
    for name, value in factors.items():
        value = np.asarray(value)
        if value.ndim == 1:
            value = value[:, None]
        write_lrkb(directory / f"{name}_{step:07d}.lrkb", value)


# ============================================================================
# MATRIX MARKET
# ============================================================================

def write_matrix_market(path: PathLike, matrix, comment: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    target = sparse.coo_matrix(matrix) if sparse.issparse(matrix) else np.atleast_2d(matrix)
    spio.mmwrite(str(path), target, comment=comment)
    logger.debug(f"Exported {path.name} ({target.shape[0]}x{target.shape[1]})")
    return path


def read_matrix_market(path: PathLike):
    return spio.mmread(str(path))
