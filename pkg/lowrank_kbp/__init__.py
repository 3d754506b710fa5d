"""
lowrank_kbp: continuous-time Kalman-Bucy filtering with dynamical low-rank
reduction (DLR-KBP, DLR-EnKF) and the studies built on it.
"""

from .errors import LowRankKBError
from .model_core import (
    LinearAffineModel,
    LowRankState,
    ObservationPath,
    RngPlan,
    build_model,
    build_upwind_model,
)

__version__ = "0.1.0"

__all__ = [
    "LowRankKBError",
    "LinearAffineModel",
    "LowRankState",
    "ObservationPath",
    "RngPlan",
    "build_model",
    "build_upwind_model",
    "__version__",
]
