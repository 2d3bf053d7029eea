"""Exception types shared across the package.

The CLI prints failures as a single ``ClassName: message`` line, so every
error raised on a user-facing path should be one of these classes.
"""


class ShapeMismatch(ValueError):
    """Operand shapes are incompatible for an op; message names the op and dims."""


class UnknownOp(ValueError):
    """An op kind string that the dispatcher does not know."""


class GraphError(RuntimeError):
    """Backward called on a non-scalar or detached tensor."""


class DataError(ValueError):
    """Bad dataset construction arguments or contents."""


class FormatError(ValueError):
    """Base for binary file format violations (IDX files, checkpoints)."""


class BadMagicError(FormatError):
    """File does not start with the expected magic number."""


class VersionMismatchError(FormatError):
    """Checkpoint format version is not supported."""


class DigestMismatchError(FormatError):
    """Checkpoint was written for a different network spec."""


class TruncatedFileError(FormatError):
    """File ended before the declared payload was read."""


class CountMismatchError(FormatError):
    """Image and label files declare different sample counts."""


class ConfigError(ValueError):
    """Invalid, unknown, or missing configuration keys."""


class NaNLossError(RuntimeError):
    """A training loss or gradient became non-finite; message says where."""
