"""Exception hierarchy shared by every cpunet module."""


class CpUnetError(Exception):
    """Base class for all errors raised by cpunet."""


class DimensionError(CpUnetError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(CpUnetError, ValueError):
    """A configuration value violates a documented constraint."""


class ContractError(CpUnetError, RuntimeError):
    """An operation was called outside its precondition (usually an upstream bug)."""


class IntegrityError(CpUnetError, RuntimeError):
    """Model structure is inconsistent (duplicate parameter names, bad checkpoint)."""


class DataError(CpUnetError, ValueError):
    """Input data is malformed (bad PGM bytes, non-binary mask, empty dataset)."""


class GenerationError(DataError):
    """The synthetic generator could not place a lesion within its retry budget."""


class NumericalError(CpUnetError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class TrainingAbort(NumericalError):
    """Training stopped because a loss component became non-finite."""

    def __init__(self, message, breakdown=None):
        super().__init__(message)
        self.breakdown = breakdown


class GradientCheckError(NumericalError):
    """Finite-difference checking hit a non-finite value."""
