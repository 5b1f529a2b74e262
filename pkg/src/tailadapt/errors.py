"""Exception hierarchy. Every failure mode the library promises is a distinct class."""


class TailAdaptError(Exception):
    """Base class for all library errors."""


class ShapeError(TailAdaptError):
    """Operand dimensions do not agree."""


class DegenerateVectorError(TailAdaptError):
    """Vector norm at or below the 1e-12 degeneracy threshold."""


class InvalidArgumentError(TailAdaptError):
    """Argument outside its documented domain (empty string, label out of range, ...)."""


class FormatError(TailAdaptError):
    """Base class for embedding-file format violations."""


class BadMagicError(FormatError):
    """File does not start with the TFAE magic."""


class UnsupportedVersionError(FormatError):
    """Header declares a format version this reader does not speak."""


class UnsupportedFlagsError(FormatError):
    """Header flags contain bits this reader does not understand."""


class DtypeMismatchError(FormatError):
    """Payload dtype differs from what the caller requires."""


class TruncatedPayloadError(FormatError):
    """Declared dimensions need more bytes than the file holds."""


class LabelRangeError(FormatError):
    """A stored label index is >= the declared class count."""


class ManifestError(TailAdaptError):
    """Dataset manifest is inconsistent with itself or its referenced files."""


class InvalidConfigError(TailAdaptError):
    """Configuration value violates an invariant."""


class InvalidDatasetError(TailAdaptError):
    """Dataset cannot support the requested operation (empty class, no labels, ...)."""


class ConfigurationError(TailAdaptError):
    """Incompatible run inputs (e.g. stage II fed two checkpoints of the same sampler)."""


class ScheduleExhaustedError(TailAdaptError):
    """Learning-rate schedule queried past its final step."""


class DivergenceError(TailAdaptError):
    """Training loss went NaN/Inf or exceeded the abort threshold."""

    def __init__(self, message: str, epoch: int):
        super().__init__(message)
        self.epoch = epoch


class CheckpointError(TailAdaptError):
    """Checkpoint directory is malformed or incomplete."""


class HashMismatchError(CheckpointError):
    """Stored content hash does not match the bytes on disk."""


class DanglingReferenceError(CheckpointError):
    """A referenced checkpoint is missing."""


class ReportError(TailAdaptError):
    """Evaluation input cannot produce a well-defined report."""
