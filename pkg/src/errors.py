"""
Exception hierarchy

Every error raised on purpose by the library derives from GaloreError so the
command line can map it to an exit code.
"""

from typing import Optional


class GaloreError(Exception):
    """Base class for all library errors."""


class DimensionError(GaloreError, ValueError):
    """Operand shapes do not fit the operation."""


class ParameterError(GaloreError, ValueError):
    """A numeric parameter (rank, ratio, oversampling...) is out of range."""

    def __init__(self, message: str, field: Optional[str] = None):
        super().__init__(message)
        self.field = field

    def __reduce__(self):
        return type(self), (str(self), self.field)


class NumericalError(GaloreError, ArithmeticError):
    """A computation produced or received non-finite values, or did not converge."""

    def __init__(self, message: str, stage: Optional[str] = None, sweeps: Optional[int] = None):
        super().__init__(message)
        self.stage = stage
        self.sweeps = sweeps

    def __reduce__(self):
        return type(self), (str(self), self.stage, self.sweeps)


class NumericalAbort(NumericalError):
    """Training stopped because the loss became non-finite."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at step {step}", stage="loss")
        self.step = step
        self.loss = loss

    def __reduce__(self):
        return type(self), (self.step, self.loss)


class ContractViolation(GaloreError, RuntimeError):
    """A caller broke a usage contract (stale cache, changed basis, inactive state)."""


class ConfigError(GaloreError, ValueError):
    """Invalid run configuration.

    Args:
        message: Human readable description
        field: Dotted name of the offending field, if known
        line: 1-based line number in the config file, if known
    """

    def __init__(self, message: str, field: Optional[str] = None, line: Optional[int] = None):
        prefix = ""
        if line is not None:
            prefix += f"line {line}: "
        if field is not None:
            prefix += f"{field}: "
        super().__init__(prefix + message)
        self.message = message
        self.field = field
        self.line = line

    def __reduce__(self):
        return type(self), (self.message, self.field, self.line)
