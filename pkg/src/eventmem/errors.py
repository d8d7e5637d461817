"""Exception hierarchy for eventmem."""


class EventMemError(Exception):
    """Base class for all eventmem errors."""


class ValidationError(EventMemError, ValueError):
    """Raw input violates a structural rule."""


class EmptySession(ValidationError):
    pass


class DuplicateSessionId(ValidationError):
    pass


class UnparsableTimestamp(ValidationError):
    def __init__(self, value):
        super().__init__(f"cannot parse timestamp {value!r}")
        self.value = value


class ProviderError(EventMemError):
    """A chat or embedding backend failed."""


class TransportError(ProviderError):
    def __init__(self, message, attempts=0):
        super().__init__(message)
        self.attempts = attempts


class ProviderRefusal(ProviderError):
    """Backend answered with a non-retryable status."""


class ScriptMiss(ProviderError, KeyError):
    """Scripted mock has no response for a request."""

    def __str__(self):
        return Exception.__str__(self)


class DimensionMismatch(EventMemError, ValueError):
    pass


class ZeroVector(EventMemError, ValueError):
    pass


class EmptyNamespace(EventMemError, LookupError):
    pass


class ExtractionParseError(EventMemError):
    """LLM output could not be parsed, even after a repair retry."""


class EmptySeed(EventMemError, ValueError):
    pass


class EmptyIndex(EventMemError):
    pass


class MissingEdu(EventMemError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class FormatError(EventMemError, ValueError):
    """Dataset file does not match the expected layout."""

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}" + (f":{line}" if line is not None else "") + ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class MissingIndex(EventMemError, LookupError):
    pass


class IndexIntegrityError(EventMemError):
    pass


class DigestMismatch(IndexIntegrityError):
    pass


class VersionMismatch(IndexIntegrityError):
    pass
