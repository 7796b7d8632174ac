class OsttaError(Exception):
    """Base class for engine errors."""


class ConfigError(OsttaError, ValueError):
    pass


class SeparationInfeasible(OsttaError):
    pass


class FormatError(OsttaError):
    pass


class DimensionMismatch(OsttaError):
    pass


class NotNormalized(OsttaError, ValueError):
    pass


class Degenerate(OsttaError):
    pass


class InvalidThresholds(OsttaError, ValueError):
    pass


class EmptyNegatives(OsttaError):
    pass


class EmptyBank(OsttaError):
    pass


class ZeroVector(OsttaError):
    pass


class NonFiniteGradient(OsttaError):
    pass


class EmptyClass(OsttaError, ValueError):
    pass
