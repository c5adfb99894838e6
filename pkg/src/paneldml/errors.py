"""Exception hierarchy.

Each class carries the CLI exit code it maps to.
"""


class PanelDMLError(Exception):
    exit_code = 3


class DataValidationError(PanelDMLError, ValueError):
    """Bad user input: malformed files, invalid configuration, bad arguments."""

    exit_code = 2


class NumericalError(PanelDMLError, ArithmeticError):
    exit_code = 1


class SingularMatrixError(NumericalError):
    def __init__(self, message, min_eigenvalue=None):
        super().__init__(message)
        self.min_eigenvalue = min_eigenvalue


class ConvergenceError(NumericalError):
    def __init__(self, message, gap=None, n_iter=None):
        super().__init__(message)
        self.gap = gap
        self.n_iter = n_iter


class InfeasibleError(NumericalError):
    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class InvariantError(PanelDMLError, AssertionError):
    exit_code = 3


class ReplicationError(PanelDMLError):
    """A Monte Carlo replication failed; carries the offending seed."""

    def __init__(self, rep, seed, cause):
        super().__init__(f"replication {rep} (seed {seed}) failed: {cause}")
        self.rep = rep
        self.seed = seed
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 3)
