"""Exception hierarchy for the CMDF lab.

Every failure raised by the library derives from ``LabError``. The runner
maps ``ScenarioError`` to exit status 2, ``NumericalError`` to exit status 3
and any other ``LabError`` to exit status 4.
"""

from typing import Optional


class LabError(Exception):
    """Base class for all lab errors."""


class ScenarioError(LabError):
    """A scenario file failed to parse or validate."""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        super().__init__(message)
        self.message = message
        self.path = path
        self.line = line

    def __str__(self) -> str:
        prefix = self.path or "<scenario>"
        if self.line is not None:
            prefix = f"{prefix}:{self.line}"
        return f"{prefix}: {self.message}"


class DimensionError(LabError, ValueError):
    """Matrix shapes are not conformable."""


class DisconnectedTopologyError(LabError, ValueError):
    """The communication graph is not connected."""


class ConsensusMatrixError(LabError, ValueError):
    """A weight matrix is not a valid consensus matrix."""


class AssumptionError(LabError):
    """An analysis precondition (e.g. equal start) does not hold."""


class NumericalError(LabError):
    """A numerical operation failed; names the module and operation."""

    default_module = "lab"
    default_operation = "compute"

    def __init__(self, message: str, module: Optional[str] = None, operation: Optional[str] = None):
        super().__init__(message)
        self.message = message
        self.module = module or self.default_module
        self.operation = operation or self.default_operation

    def __str__(self) -> str:
        return f"{self.module}.{self.operation}: {self.message}"


class SingularMatrixError(NumericalError):
    pass


class NotPositiveDefiniteError(NumericalError):
    pass


class NotSchurStableError(NumericalError):
    pass


class ConvergenceError(NumericalError):
    pass


class DivergenceError(NumericalError):
    """A Monte Carlo run produced non-finite values."""

    def __init__(self, message: str, run_index: int, module: Optional[str] = None,
                 operation: Optional[str] = None):
        super().__init__(message, module, operation)
        self.run_index = run_index
