"""
Exception hierarchy shared by the stwarp modules.

The CLI maps these onto exit codes:
    ConfigError, DataError  -> 2
    NumericalError          -> 4
"""


class StwarpError(Exception):
    """Base class for all stwarp failures."""


class ConfigError(StwarpError):
    """Bad or unknown configuration entry."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"{message} (line {line})"
        super().__init__(message)
        self.line = line


class DataError(StwarpError):
    """Malformed input table."""

    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class RankDeficientError(DataError):
    """Covariate matrix X does not have full column rank."""


class NumericalError(StwarpError):
    """A factorization or objective evaluation broke down."""


class SingularNeighborhoodError(NumericalError):
    """Neighbor covariance block stayed singular after the jitter retry."""

    def __init__(self, index):
        super().__init__(f"neighbor covariance for ordered observation {index} is singular after jitter")
        self.index = index


class NonFiniteObjectiveError(NumericalError):
    """Objective evaluated to NaN/inf at the starting parameters."""


class SimulationError(NumericalError):
    """Dense Cholesky of the simulation covariance failed."""

    def __init__(self, message, min_eigenvalue=None):
        if min_eigenvalue is not None:
            message = f"{message} (smallest eigenvalue ~ {min_eigenvalue:.3e})"
        super().__init__(message)
        self.min_eigenvalue = min_eigenvalue
