"""
Exception hierarchy shared by the library and the CLI.

Every error carries the process exit code the CLI returns for it:
  0 success, 2 config/schema error, 3 numerical divergence, 4 comparison
  beyond tolerance. Anything else derived from LowRankKBError exits with 1.
"""

from typing import Optional


class LowRankKBError(Exception):
    """Base class for all errors raised by lowrank_kbp."""
    exit_code = 1


# ============================================================================
# INPUT / MODEL ERRORS
# ============================================================================

class ModelError(LowRankKBError, ValueError):
    """Invalid model, state or argument."""


class DimensionMismatch(ModelError):
    pass


class NotPositiveDefinite(ModelError):
    pass


class NotPSD(ModelError):
    pass


class InvalidGrid(ModelError):
    pass


class TooFewParticles(ModelError):
    pass


class EmptyBasis(ModelError):
    pass


class RankExceedsWidth(ModelError):
    pass


class MismatchedEnsembles(ModelError):
    pass


class NonPositiveData(ModelError):
    pass


class EmptySquare(ModelError):
    pass


class AssemblyFailure(ModelError):
    pass


# ============================================================================
# NUMERICAL ERRORS
# ============================================================================

class NumericalError(LowRankKBError, ArithmeticError):
    exit_code = 3


class NonFiniteState(NumericalError):
    """A state update produced inf/nan (filter divergence or unstable dt)."""

    def __init__(self, what: str, step: Optional[int] = None):
        self.what = what
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"Non-finite entries in {what}{where}")

    def at_step(self, step: int) -> "NonFiniteState":
        return NonFiniteState(self.what, step)


class RankCollapse(NumericalError):
    pass


class SolveFailed(NumericalError):
    pass


# ============================================================================
# CLI ERRORS
# ============================================================================

class ConfigError(LowRankKBError):
    exit_code = 2

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class SchemaMismatch(LowRankKBError):
    exit_code = 2


class ToleranceExceeded(LowRankKBError):
    exit_code = 4
