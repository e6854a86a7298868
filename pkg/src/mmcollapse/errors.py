class MMCollapseError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(MMCollapseError, ValueError):
    pass


class InputError(MMCollapseError, ValueError):
    pass


class StateError(MMCollapseError, RuntimeError):
    pass


class IngestionError(InputError):
    pass


class IntegrityError(MMCollapseError):
    """Checkpoint payload failed its checksum or is truncated."""


class VersionError(MMCollapseError):
    pass


class UsageError(MMCollapseError):
    pass
