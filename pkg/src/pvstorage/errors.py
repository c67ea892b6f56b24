"""Exception types raised across the package.

All of them derive from ``ValueError`` so callers that only care about
"bad input" can catch that.
"""


class PvStorageError(ValueError):
    pass


class DegenerateParameters(PvStorageError):
    pass


class InvalidFrequencies(PvStorageError):
    pass


class NonMeanRevertingResiduals(PvStorageError):
    pass


class SocOutOfRange(PvStorageError):
    pass


class InadmissibleAction(PvStorageError):
    pass


class InfeasibleStep(PvStorageError):
    pass


class PolicyViolation(PvStorageError):
    pass


class UnstableGrid(PvStorageError):
    pass


class BadStencil(PvStorageError):
    pass


class ExtrapolationRefused(PvStorageError):
    pass


class ConfigMismatch(PvStorageError):
    pass


class SeriesParseError(PvStorageError):
    pass
