"""Exception hierarchy shared across the package."""


class FenodeError(Exception):
    """Base class for all package errors."""


class ConfigError(FenodeError, ValueError):
    """Invalid configuration, dimension descriptor or argument."""


class ShapeError(FenodeError, ValueError):
    """Array shapes do not match what an operation expects."""


class NumericError(FenodeError, ArithmeticError):
    """Non-finite values or an ill-posed linear system."""


class DivergenceError(NumericError):
    """A state became non-finite during integration or training.

    ``step`` is the substep / rollout step / training step at which it happened.
    """

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


class PlanningError(NumericError):
    """Every MPC candidate diverged."""


class CorruptFileError(FenodeError):
    """A model or dataset file is truncated or has the wrong magic header."""


class VersionMismatchError(CorruptFileError):
    def __init__(self, found: int, expected: int):
        super().__init__(f"file format version {found} is not supported (expected {expected})")
        self.found = found
        self.expected = expected
