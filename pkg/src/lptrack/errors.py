"""Exception hierarchy with stable identifiers surfaced by the CLI."""


class LptrackError(Exception):
    """Base class; ``code`` is a stable machine-readable identifier."""

    code = "error"


class InvalidInputError(LptrackError, ValueError):
    code = "invalid-input"


class CapExceededError(InvalidInputError):
    code = "cap-exceeded"


class StorageError(LptrackError, OSError):
    code = "storage-error"


class OrderingError(LptrackError, ValueError):
    code = "ordering-error"


class ProtocolError(LptrackError):
    """Malformed or rejected API response."""

    code = "protocol-error"


class LogprobsUnsupportedError(ProtocolError):
    code = "logprobs-unsupported"


class ConfigError(LptrackError, ValueError):
    code = "config-error"


class UsageError(LptrackError):
    """Bad command-line arguments."""

    code = "usage"
