"""Exception hierarchy shared across the package."""


class LatentVLError(Exception):
    """Base class for all package errors."""


class ShapeError(LatentVLError):
    """Tensor or input dimensions are inconsistent."""


class ParameterError(LatentVLError):
    """A configuration value or function argument is out of range."""


class ContractError(LatentVLError):
    """A documented precondition was violated by the caller."""


class VocabularyError(LatentVLError):
    """A token id falls outside the vocabulary."""


class CapacityError(LatentVLError):
    """An input exceeds a configured maximum (frames, text length)."""


class CheckpointError(LatentVLError):
    """A checkpoint file failed validation on load."""


class NumericError(LatentVLError):
    """A numeric failure (NaN loss, failed gradient check)."""
