"""Exception types shared across the codec pipeline."""


class FormatError(ValueError):
    """Input file exists but is not in the expected format."""


class ShapeError(ValueError):
    """Array dimensions are inconsistent with the operation's contract."""


class CorruptStreamError(Exception):
    """Bitstream failed magic, version, or CRC validation."""


class TrainingError(RuntimeError):
    """Training diverged or could not proceed."""


class ConfigError(ValueError):
    """Configuration is invalid or references missing artifacts."""


class DegenerateInputError(ValueError):
    """Input carries no usable information for the requested operation."""
