"""Exception hierarchy shared by every module."""


class DenseSRError(Exception):
    """Base class for all package errors."""


class ShapeError(DenseSRError, ValueError):
    pass


class ConfigError(DenseSRError, ValueError):
    pass


class ContractError(DenseSRError, RuntimeError):
    """An operation was called in a state its contract forbids."""


class CheckpointError(DenseSRError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedRecordError(CheckpointError):
    pass


class WeightShapeMismatchError(CheckpointError):
    """Checkpoint tensors disagree with the shapes implied by its config."""


class PGMError(DenseSRError, ValueError):
    pass


class PGMHeaderError(PGMError):
    pass


class PGMSizeError(PGMError):
    pass


class PGMMaxValueError(PGMError):
    pass
