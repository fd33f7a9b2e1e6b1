"""Exception types shared across the package."""


class AudiotapError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(AudiotapError):
    """Bad or inconsistent configuration (unknown model id, invalid key, ...)."""


class LoadError(AudiotapError):
    """A model or file could not be loaded from disk."""


class InvalidInputError(AudiotapError):
    """An operation was called with input that violates its contract."""


class CacheFormatError(AudiotapError):
    """A cache record is corrupt or has an unsupported format version."""


class RecordNotFoundError(AudiotapError):
    """No cache record exists for the requested utterance id."""


class TrainingError(AudiotapError):
    """Training aborted (missing features, NaN loss, empty split, ...)."""
