"""Exception hierarchy shared across the package.

The CLI maps these onto stable exit codes, so raise the most specific
class available rather than bare ValueError.
"""


class MoefoldError(Exception):
    """Base class for all package errors."""


class ShapeError(MoefoldError):
    """Tensor shapes incompatible for the requested operation."""


class ConfigError(MoefoldError):
    """Invalid configuration value or constraint violation."""


class InputError(MoefoldError):
    """Invalid runtime input (token ids, empty data, out-of-range step)."""


class GateError(MoefoldError):
    """Gating produced or received an unusable logit row (e.g. fully masked)."""


class OracleError(MoefoldError):
    """A verification oracle cannot be trusted (e.g. non-deterministic target)."""


class CheckpointError(MoefoldError):
    """Base class for checkpoint load/save failures."""


class ManifestError(CheckpointError):
    """Manifest disagrees with itself or with the weights payload."""


class TruncatedFileError(CheckpointError):
    """Weights payload shorter than the manifest declares."""


class UnknownVersionError(CheckpointError):
    """Checkpoint format version not supported by this reader."""


class ChecksumError(CheckpointError):
    """Stored CRC32C does not match the payload; message names the tensor."""


class SchemaError(MoefoldError):
    """Tensor set does not match the expected checkpoint schema."""


class IntegrityError(MoefoldError):
    """Shard set incomplete or inconsistent (missing tile, replica mismatch)."""


class VerificationError(MoefoldError):
    """An equivalence check between two checkpoints found a difference."""


class FoldingError(MoefoldError):
    """A requested parallel group kind does not fit inside one node."""


class NumericAbort(MoefoldError):
    """Training hit a non-finite loss; carries the last good step."""

    def __init__(self, message: str, last_good_step: int):
        super().__init__(message)
        self.last_good_step = last_good_step
