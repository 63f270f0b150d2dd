"""Error hierarchy shared by every elastolab service."""

from typing import Any, Optional


class ElastolabError(Exception):
    """Root of all errors raised by the package."""


class ValidationError(ElastolabError, ValueError):
    """An invariant or precondition was violated by the caller's input."""


class FieldFormatError(ElastolabError):
    """A binary container (MREG, MREP, DIMC) could not be decoded."""


class NumericalError(ElastolabError):
    """A numerical stage failed: singular system, residual too large, non-finite values."""

    def __init__(self, message: str, *, residual: Optional[float] = None, parameter: Optional[str] = None):
        super().__init__(message)
        self.residual = residual
        self.parameter = parameter


class TrainingDiverged(NumericalError):
    """Training produced a non-finite loss; carries the last good state."""

    def __init__(self, message: str, *, params: Any = None, history: Any = None):
        super().__init__(message)
        self.params = params
        self.history = history
