"""Exception hierarchy shared across the package.

Every error raised by prl code derives from PrlError so callers (and the
CLI) can distinguish our failures from genuine bugs.
"""


class PrlError(Exception):
    """Base class for all prl errors."""


class DimensionError(PrlError):
    """Tensor shapes incompatible with the requested operation."""


class ContractError(PrlError):
    """An API precondition was violated (wrong mode, wrong head, ...)."""


class ValidationError(PrlError):
    """A configuration or specification value is out of its legal range."""


class InputError(PrlError):
    """Input data unusable (empty stream, corpus too small, ...)."""


class ParseError(InputError):
    """A corpus file line could not be parsed; message names the line."""


class SchemaError(PrlError):
    """Structured data does not match the expected schema (tags, vocab)."""


class NumericError(PrlError):
    """A numeric invariant broke (NaN/Inf where finite values are required)."""


class TrainingDiverged(NumericError):
    """Training aborted because the loss or validation PPL blew up."""


class CheckpointError(SchemaError):
    """A checkpoint file could not be loaded."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint magic/version does not match this implementation."""


class CheckpointTruncatedError(CheckpointError):
    """Checkpoint file ended before all declared parameter bytes."""


class CheckpointShapeError(CheckpointError):
    """Checkpoint parameter blob sizes disagree with the declared shapes."""
