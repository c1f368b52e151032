"""Exception types shared across the package."""


class ContractError(ValueError):
    """An argument violates a documented precondition."""


class ConfigurationError(ValueError):
    """A configuration is inconsistent or impossible to satisfy."""


class AudioFormatError(ValueError):
    """An audio file exists but cannot be decoded as supported PCM."""


class DegenerateInputError(ValueError):
    """Input is valid in shape but degenerate for the operation (e.g. all-zero signal)."""


class UnsupportedOperationError(RuntimeError):
    """The differentiation engine was asked for something it does not support."""


class CheckpointError(RuntimeError):
    """A checkpoint file is missing, corrupt, or has an incompatible format version."""


class OracleError(RuntimeError):
    """An independent verification oracle could not produce a finite result."""


class ExperimentAbort(RuntimeError):
    """Training was aborted; carries a diagnostic snapshot."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot
