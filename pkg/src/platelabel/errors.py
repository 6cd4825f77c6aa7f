"""Exception hierarchy shared by every module in the package."""


class PlateLabelError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(PlateLabelError, ValueError):
    pass


class UnsupportedOp(PlateLabelError, ValueError):
    pass


class NonFinite(PlateLabelError, FloatingPointError):
    pass


class NotScalar(PlateLabelError, ValueError):
    pass


class DetachedGraph(PlateLabelError, RuntimeError):
    pass


class IndivisibleSpatialDims(ShapeMismatch):
    pass


class GroupOverflow(PlateLabelError, ValueError):
    """More query groups than labels."""


class BadMagic(PlateLabelError, ValueError):
    pass


class TruncatedFile(PlateLabelError, ValueError):
    pass


class DimOverflow(PlateLabelError, ValueError):
    pass


class NonBinaryTarget(PlateLabelError, ValueError):
    pass


class EmptyInput(PlateLabelError, ValueError):
    pass


class NoPositives(PlateLabelError, ValueError):
    pass


class OutOfRange(PlateLabelError, ValueError):
    pass


class NonFiniteGrad(NonFinite):
    pass


class DataError(PlateLabelError):
    """Anything wrong with a dataset on disk or in memory."""


class UnknownLabel(DataError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class MissingImage(DataError, FileNotFoundError):
    pass


class DuplicateAcrossSplits(DataError, ValueError):
    pass


class EmptyDataset(DataError, ValueError):
    pass


class InvalidSpec(PlateLabelError, ValueError):
    pass


class ConfigError(PlateLabelError, ValueError):
    pass


class CheckpointError(PlateLabelError):
    pass


class Divergence(PlateLabelError, FloatingPointError):
    """Training loss became NaN or infinite."""
