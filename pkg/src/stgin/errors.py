"""Exception taxonomy shared across the package.

The CLI maps these onto its exit codes: config/validation problems exit 2,
file format problems exit 3, numerical failures exit 4.
"""


class StginError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(StginError):
    """Operand shapes disagree; the message names both shapes."""


class ParameterError(StginError):
    """An operation parameter is out of its documented range."""


class ContractError(StginError):
    """A module-boundary precondition was violated by the caller."""


class ValidationError(StginError):
    """Input data or configuration failed semantic validation."""


class FormatError(StginError):
    """A file could not be parsed; the message carries the location."""


class DataError(StginError):
    """Dataset content makes the requested operation undefined."""


class TrainingError(StginError):
    """Training diverged; the last finite iterate is preserved on the model."""

    def __init__(self, message, loss_trace=None):
        super().__init__(message)
        self.loss_trace = list(loss_trace) if loss_trace is not None else []


class CheckpointError(StginError):
    """A checkpoint is unreadable or disagrees with the requested dims."""
