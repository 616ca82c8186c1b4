"""Exception hierarchy shared by all quicfl modules."""


class QuicFLError(Exception):
    """Base class for every domain error raised by quicfl."""


class DomainError(QuicFLError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class RangeError(DomainError):
    """A coordinate falls outside the bounded support of the quantizer."""


class StructuralError(QuicFLError):
    """Array shapes disagree with the configuration they claim to describe."""


class TableFormatError(QuicFLError):
    """A table file could not be parsed."""


class ChecksumError(TableFormatError):
    pass


class VersionError(TableFormatError):
    pass


class WireFormatError(QuicFLError):
    """An encoded message is malformed or inconsistent with its decoder."""


class InfeasibleError(QuicFLError):
    """No feasible solution was found; ``best`` carries the closest attempt."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best
