"""Exception hierarchy shared across the package.

Every domain failure derives from :class:`FssuwError` so the CLI can map
them to exit code 1 while genuine bugs still surface as tracebacks.
"""


class FssuwError(Exception):
    """Base class for all domain errors raised by this package."""


# --- dataset / episode errors ---

class MissingDirectory(FssuwError):
    pass


class UnmappableMaskColor(FssuwError):
    pass


class UnknownClass(FssuwError):
    pass


class InsufficientClasses(FssuwError):
    pass


class ClassTooSmall(FssuwError):
    pass


class EmptyMaskAfterResize(FssuwError):
    pass


class EmptyEpisodeList(FssuwError):
    pass


# --- tensor / network errors ---

class IndivisibleInput(FssuwError):
    pass


class ShapeMismatch(FssuwError):
    pass


class EmptyMask(FssuwError):
    pass


class PolarityMismatch(FssuwError):
    pass


class DegenerateGT(FssuwError):
    pass


# --- persistence errors ---

class ConfigMismatch(FssuwError):
    pass


class CorruptFile(FssuwError):
    pass


# --- training errors ---

class NonFiniteLoss(FssuwError):
    pass
