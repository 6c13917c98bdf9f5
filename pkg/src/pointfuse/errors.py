"""Exception hierarchy shared across the package."""


class PointfuseError(Exception):
    """Base class for all library errors."""


class GeometryError(PointfuseError):
    pass


class NonPositiveDepth(GeometryError):
    pass


class DegenerateConfiguration(GeometryError):
    pass


class FormatError(PointfuseError):
    """A binary file has a bad magic, version or is truncated."""


class ConfigMismatch(PointfuseError):
    pass


class ConfigError(PointfuseError):
    pass


class SchemaError(PointfuseError):
    pass


class EmptyView(PointfuseError):
    pass


class ShapeError(PointfuseError):
    pass


class PoolTooSmall(PointfuseError):
    pass


class NonFiniteActivation(PointfuseError):
    pass


class StaleTape(PointfuseError):
    pass


class EmptyMask(PointfuseError):
    pass


class DegenerateScale(PointfuseError):
    pass


class NonFiniteGradient(PointfuseError):
    pass


class DivergedError(PointfuseError):
    pass


class TooFewPoints(PointfuseError):
    pass


class NoConsensus(PointfuseError):
    pass


class TooFewViews(PointfuseError):
    pass


class EmptyCloud(PointfuseError):
    pass


class NonPositiveGtDepth(PointfuseError):
    pass
