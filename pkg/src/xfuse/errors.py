"""Exception types shared across the package."""


class XfuseError(Exception):
    """Base class for all package errors."""


class ShapeError(XfuseError, ValueError):
    """Tensor dimensions do not satisfy an operation's contract."""


class ValidationError(XfuseError, ValueError):
    """Input values violate a precondition (non-binary targets, empty input, ...)."""


class ConfigError(XfuseError, ValueError):
    """Invalid configuration or hyperparameter."""


class ContractError(XfuseError, RuntimeError):
    """A caller broke an API contract (non-scalar loss seed, missing gradient, ...)."""


class TransferError(XfuseError, ValueError):
    """Segmentation encoder weights cannot be copied into the classifier."""

    def __init__(self, names):
        self.names = list(names)
        super().__init__("incompatible parameters: " + ", ".join(self.names))


class ManifestError(XfuseError, ValueError):
    """Lesion maps are missing for some sample ids."""

    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__("missing lesion maps for ids: " + ", ".join(self.missing))


class CheckpointError(XfuseError):
    """Base class for container read/write failures."""


class HeaderError(CheckpointError):
    """Bad magic or unknown model kind."""


class VersionError(CheckpointError):
    """Container format version this reader does not understand."""


class TruncationError(CheckpointError):
    """File ended before the declared content."""


class ChecksumError(CheckpointError):
    """Trailing FNV-1a checksum does not match the content."""


class FormatError(CheckpointError):
    """Structurally invalid content (duplicate names, bad UTF-8, trailing bytes)."""


class KindError(CheckpointError):
    """Container holds a different model kind than the caller expected."""


class DivergenceError(XfuseError, RuntimeError):
    """Training loss became non-finite."""
