"""Exception types shared across the toolkit.

The CLI maps these onto stable exit codes: config/usage problems exit 2,
I/O problems exit 1, numeric failures exit 3.
"""


class ToolkitError(Exception):
    """Base class for all toolkit errors."""


class ContractError(ToolkitError):
    """A caller violated an operation precondition (shapes, ranges, provenance)."""


class FormatError(ToolkitError):
    """A file is structurally malformed (bad RIFF header, truncated chunk)."""


class UnsupportedEncodingError(ToolkitError):
    """A file is well-formed but uses an encoding the toolkit does not read."""


class ConfigError(ToolkitError):
    """A configuration value or combination is unusable."""


class GeometryError(ToolkitError):
    """A room/array/source layout is physically infeasible."""


class NumericError(ToolkitError):
    """A numerical operation failed (singular matrix, divergence)."""


class TrainingDivergedError(NumericError):
    """Training loss became non-finite; carries the offending batch."""

    def __init__(self, message: str, epoch: int, batch_index: int):
        super().__init__(message)
        self.epoch = epoch
        self.batch_index = batch_index
