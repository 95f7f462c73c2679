"""Exception hierarchy shared by every iatforge module."""

from __future__ import annotations


class IatForgeError(Exception):
    """Base class for all errors raised by iatforge."""


# --- PE parsing -------------------------------------------------------------


class PeFormatError(IatForgeError):
    """The input is not a PE image this package can walk."""


class MalformedHeader(PeFormatError):
    pass


class OutOfBounds(PeFormatError):
    pass


class Cyclic(PeFormatError):
    """A table walk exceeded its safety cap."""


class InconsistentCounts(PeFormatError):
    pass


class MissingDirectory(PeFormatError):
    """A walk was requested on an absent data directory."""


# --- feature store ----------------------------------------------------------


class CapacityExhausted(IatForgeError):
    pass


class VersionMismatch(IatForgeError):
    pass


class IndexOutOfRange(IatForgeError, IndexError):
    pass


class LengthMismatch(IatForgeError, ValueError):
    pass


class DegenerateInput(IatForgeError, ValueError):
    pass


class StoreFormatError(IatForgeError):
    """A persisted artifact could not be decoded."""


class BadMagic(StoreFormatError):
    pass


class UnsupportedVersion(StoreFormatError):
    pass


class CorruptPayload(StoreFormatError):
    pass


# --- detectors / evaluation -------------------------------------------------


class BothEmpty(IatForgeError, ValueError):
    pass


class EmptyBase(IatForgeError, ValueError):
    pass


class EmptyVector(IatForgeError, ValueError):
    pass


class IncompatibleRegistry(IatForgeError):
    pass
