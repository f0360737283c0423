"""Exception and warning types raised across the package."""


class KVPipeError(Exception):
    """Base class for all errors raised by kvpipe."""


class CapacityError(KVPipeError):
    """A single request can never fit into a storage tier."""


class DegenerateFit(KVPipeError):
    """Profiling samples do not determine a line (all token counts equal)."""


class MissingDeadline(KVPipeError):
    """A deadline-driven policy was asked to rank a request without a deadline."""


class UnknownProfile(KVPipeError, KeyError):
    pass


class IncompleteTrace(KVPipeError):
    """Some request never produced a first token."""


class WindowTooLong(KVPipeError):
    pass


class ConfigError(KVPipeError, ValueError):
    """Invalid experiment or cluster configuration.

    ``errors`` holds ``(field_path, message)`` pairs.
    """

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [("", errors)]
        self.errors = list(errors)
        lines = [f"{path}: {msg}" if path else msg for path, msg in self.errors]
        super().__init__("; ".join(lines))


class OverloadWarning(RuntimeWarning):
    """Pending queue grew past the configured bound."""


class FitWarning(UserWarning):
    """A fitted cost coefficient was negative and has been clamped to zero."""
