"""Exception taxonomy shared across the package.

Every error raised on a contract violation derives from ``TransfactError``
so callers (and the CLI) can map failures to exit codes without matching
on message strings.
"""


class TransfactError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(TransfactError):
    """Operands have incompatible dimensions."""


class InsufficientInputError(TransfactError):
    """Too little input to compute anything (empty list, single frame, ...)."""


class ConfigError(TransfactError):
    """Invalid configuration value or combination."""


class InputError(TransfactError):
    """Malformed runtime input (non-finite costs, length mismatch, ...)."""


class LabelError(TransfactError):
    """A class label is outside its declared range."""


class CapacityError(TransfactError):
    """More segments than tokens; an injective assignment cannot exist."""


class StratificationError(TransfactError):
    """Too few entries per class to honor the requested split ratios."""


class ParseError(TransfactError):
    """A file does not conform to its binary/textual format.

    ``offset`` is the byte offset at which parsing failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class FormatVersionError(TransfactError):
    """File or checkpoint was written by an incompatible version/config."""


class ValidationError(TransfactError):
    """A data invariant is violated (duplicate ids, ragged lengths, ...)."""


class NumericError(TransfactError):
    """A numeric computation produced NaN/Inf where finite values are required."""


class OverwriteRefusedError(TransfactError):
    """An output directory already holds results and --force was not given."""
