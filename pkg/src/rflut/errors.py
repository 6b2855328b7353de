"""Exception types shared across the package."""


class InvalidInput(ValueError):
    """Input vector or constructor argument violates a precondition."""


class DimensionTooLarge(ValueError):
    """Operation only supports small index dimensions."""


class InvalidPattern(ValueError):
    """Sampling pattern violates the tap-budget or geometry rules."""


class ShapeError(ValueError):
    """Array shapes are incompatible."""


class EmptySetError(ValueError):
    """A point set that must be nonempty is empty."""


class IndexOutOfBounds(IndexError):
    """Grid index outside the table's index ranges."""


class StorageOverflow(OverflowError):
    """Table storage exceeds the supported size."""


class BudgetError(ValueError):
    """Requested byte budget cannot be met by any grid."""


class DivergenceError(ArithmeticError):
    """Training produced a non-finite loss."""


class FidelityError(RuntimeError):
    """Compiled table disagrees with its source network on a grid point."""


class ConfigError(ValueError):
    """Malformed pipeline or topology configuration."""


class PatternWarning(UserWarning):
    """Non-fatal diagnostic about a sampling pattern choice."""


class ParseError(ValueError):
    """Base class for table-file parse failures."""


class BadMagic(ParseError):
    """File does not start with the table magic."""


class BadVersion(ParseError):
    """Unsupported format version."""


class Truncated(ParseError):
    """File ends before the declared payload is complete."""


class LengthMismatch(ParseError):
    """Trailing bytes after the checksum."""


class BadChecksum(ParseError):
    """CRC-32 over the payload does not match."""


class InvalidField(ParseError):
    """A header field holds an out-of-range or inconsistent value."""
