"""Exception hierarchy shared by every cvfc module.

Two top-level families matter for scripting: ``ValidationError`` covers
bad inputs, bad configs and I/O problems (CLI exit code 1), while
``NumericError`` covers non-finite values and failed numerical checks
(CLI exit code 2).
"""


class CvfcError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(CvfcError):
    """Bad arguments, configs, files or shapes. Maps to exit code 1."""


class ShapeError(ValidationError):
    """Tensor or mask dimensions do not match the operation's contract."""


class ConfigError(ValidationError):
    """A configuration value violates its invariants."""


class DataError(ValidationError):
    """Dataset ingestion failed (missing, unreadable or mis-sized files)."""


class LabelParseError(DataError):
    """A bracket-style label suffix could not be parsed from a filename."""


class EvalPairingError(ValidationError):
    """Prediction and ground-truth mask sets could not be paired."""


class CheckpointError(ValidationError):
    """Checkpoint file could not be read or written."""


class CorruptCheckpointError(CheckpointError):
    """Magic or CRC mismatch: the file is not a valid checkpoint."""


class CheckpointVersionError(CheckpointError):
    """The checkpoint format version is not supported by this build."""


class NumericError(CvfcError):
    """Non-finite values or a failed numerical check. Maps to exit code 2."""


class TrainingAbort(NumericError):
    """Training stopped because the objective became non-finite."""

    def __init__(self, message, breakdown=None):
        super().__init__(message)
        self.breakdown = breakdown


class GradCheckFailure(NumericError):
    """An analytic gradient disagreed with central finite differences."""
