"""Error hierarchy shared by every service.

Each error's ``code`` is its class name; the HTTP layer and the CLI print
that code verbatim, and the HTTP clients map it back to the same class.
"""


class ChainError(Exception):
    """Base class for all domain errors."""

    def __init__(self, message="", **detail):
        super().__init__(message or self.__class__.__name__)
        self.message = message or self.__class__.__name__
        self.detail = detail

    @property
    def code(self):
        return self.__class__.__name__

    def to_dict(self):
        return {"code": self.code, "message": self.message, "detail": self.detail}


# ledger-core
class DecodeError(ChainError):
    pass


class InvalidCertificate(ChainError):
    pass


class SignatureMismatch(ChainError):
    pass


class EmptyEntries(ChainError):
    pass


class NonMonotonicTimestamps(ChainError):
    pass


class WrongCreatorRole(ChainError):
    pass


# chain-store
class CorruptLayout(ChainError):
    pass


class IoFailure(ChainError):
    pass


class HeightGap(ChainError):
    pass


class LinkMismatch(ChainError):
    pass


class DestinationNotEmpty(ChainError):
    pass


class SourceCorrupt(ChainError):
    pass


# bcms-gateway
class AlreadyRegistered(ChainError):
    pass


class InvalidGenesis(ChainError):
    pass


class UnknownChain(ChainError):
    pass


class NotAuthorized(ChainError):
    pass


class OutOfRange(ChainError):
    pass


# uas-identity
class ClockSkew(ChainError):
    pass


class InvalidValidity(ChainError):
    pass


class UnknownFingerprint(ChainError):
    pass


class BrokenChain(ChainError):
    pass


# bcs-builder
class BadInstitutionSignature(ChainError):
    pass


class BadCustomerSignature(ChainError):
    pass


class NotPermitted(ChainError):
    pass


class DuplicateExternalRef(ChainError):
    pass


class EmptyQueue(ChainError):
    pass


class PublishFailed(ChainError):
    pass


# reporting-service
class TamperedChain(ChainError):
    pass


# institution-feed
class BindFailure(ChainError):
    pass


# transport and configuration
class BadRequest(ChainError):
    pass


class TransportError(ChainError):
    """The remote end could not be reached or answered garbage."""


class ConfigError(ChainError):
    pass


def _all_subclasses(cls):
    for sub in cls.__subclasses__():
        yield sub
        yield from _all_subclasses(sub)


ERRORS_BY_CODE = {cls.__name__: cls for cls in _all_subclasses(ChainError)}
ERRORS_BY_CODE["ChainError"] = ChainError


def from_dict(body):
    """Rebuild an exception from an ``{code, message, detail}`` body."""
    cls = ERRORS_BY_CODE.get(body.get("code"), ChainError)
    return cls(body.get("message", ""), **(body.get("detail") or {}))
