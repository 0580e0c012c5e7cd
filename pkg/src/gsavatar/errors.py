"""Exception taxonomy shared across the engine.

The CLI maps ValidationError (and subclasses) to exit code 1 and every
other failure to exit code 2.
"""


class ValidationError(ValueError):
    """Inputs violate a documented precondition or invariant."""


class BoundsError(ValidationError):
    """An index or coordinate falls outside its valid range."""


class StateError(RuntimeError):
    """An operation was called before its required state was prepared."""


class ProviderUnavailable(RuntimeError):
    """The guidance provider could not serve a request (timeout, protocol)."""
