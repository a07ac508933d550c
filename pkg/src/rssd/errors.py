"""Error taxonomy shared by every module.

Each class maps to one failure family; callers are expected to catch the
narrowest class they can handle. All of them derive from RssdError so a CLI
can catch everything in one place without swallowing unrelated bugs.
"""


class RssdError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(RssdError, ValueError):
    """Array arguments have incompatible or invalid shapes."""


class DomainError(RssdError, ValueError):
    """A scalar argument is outside its documented domain."""


class NumericError(RssdError, ArithmeticError):
    """A computation produced or received non-finite values, or failed to converge."""


class DataError(RssdError, ValueError):
    """A dataset or sample collection violates a precondition (too few samples, one class, ...)."""


class FormatError(RssdError, ValueError):
    """An external file does not conform to its documented binary/text layout."""


class CorruptionError(FormatError):
    """A file matched its format superficially but carries inconsistent content."""


class ConfigError(RssdError, ValueError):
    """An experiment configuration is invalid (unknown key, bad value, bad combination)."""


class CheckpointError(RssdError, ValueError):
    """Base for checkpoint load failures; subclasses distinguish the cause."""


class CorruptHeaderError(CheckpointError):
    """Checkpoint file does not start with the expected magic bytes."""


class TruncatedCheckpointError(CheckpointError):
    """Checkpoint file ended before the declared payload was complete."""


class VersionMismatchError(CheckpointError):
    """Checkpoint format version is not supported by this build."""
