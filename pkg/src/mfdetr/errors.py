"""Exception types raised across the package."""


class MFDError(Exception):
    """Base class for every error raised by mfdetr."""


class ShapeMismatch(MFDError, ValueError):
    pass


class InvalidGroups(MFDError, ValueError):
    pass


class InvalidAxis(MFDError, ValueError):
    pass


class InvalidStride(MFDError, ValueError):
    pass


class InvalidSize(MFDError, ValueError):
    pass


class NonScalarLoss(MFDError, ValueError):
    pass


class TapeConsumed(MFDError, RuntimeError):
    pass


class DegenerateBox(MFDError, ValueError):
    pass


class UnknownFormat(MFDError, ValueError):
    pass


class InvalidSpec(MFDError, ValueError):
    pass


class TooFewQueries(MFDError, ValueError):
    pass


class InvalidN(MFDError, ValueError):
    pass


class ConfigError(MFDError, ValueError):
    pass


class MissingGradient(MFDError, RuntimeError):
    pass


class EmptyDataset(MFDError, ValueError):
    pass


class FormatError(MFDError, ValueError):
    """Malformed MFDT payload or checkpoint."""
