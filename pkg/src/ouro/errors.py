"""Exception taxonomy shared across the package.

Exit-code classes for the CLI: UsageError -> 2, NumericError -> 3,
CheckpointError / OSError -> 4.
"""


class OuroError(Exception):
    """Base class for all package errors."""


class DimensionError(OuroError):
    """Operand shapes (or dtypes) are incompatible for an operation."""


class ConfigError(OuroError):
    """A configuration value violates a documented constraint."""


class ContractError(OuroError):
    """An operation was called outside its contract (e.g. backward on a non-scalar)."""


class DegenerateInputError(OuroError):
    """Input is structurally valid but degenerate (e.g. all-zero pooling mask row)."""


class NumericError(OuroError):
    """Numeric failure: NaN/Inf encountered, or a numeric check did not pass."""


class TrainingAborted(NumericError):
    """Training stopped on a non-finite loss or gradient."""

    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


class FreezingViolation(OuroError):
    """A frozen tensor received a gradient or entered the optimizer."""


class CheckpointError(OuroError):
    """Base class for checkpoint container failures."""


class BadMagicError(CheckpointError):
    """File does not start with the container magic."""


class BadVersionError(CheckpointError):
    """Container version is not supported."""


class ChecksumError(CheckpointError):
    """Trailing checksum does not match the file contents."""


class UsageError(OuroError):
    """Invalid command-line or config-file input."""
