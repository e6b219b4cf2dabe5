"""Exception types shared across the package."""


class RgbdFuseError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(RgbdFuseError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(RgbdFuseError, ValueError):
    """A precondition of an operation was violated."""


class NumericError(RgbdFuseError, ArithmeticError):
    """NaN or infinite values where finite ones are required."""


class FormatError(RgbdFuseError, ValueError):
    """A file or encoded payload is malformed."""


class ValidationError(RgbdFuseError, ValueError):
    """A dataset violates its invariants."""

    def __init__(self, message, violations=()):
        super().__init__(message)
        self.violations = list(violations)


class GenerationError(RgbdFuseError, RuntimeError):
    """Synthetic scene placement failed after the retry budget."""


class ConfigurationError(RgbdFuseError, ValueError):
    """A model or run configuration is inconsistent."""


class TrainingError(RgbdFuseError, RuntimeError):
    """Training diverged; carries a diagnostics dictionary."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
