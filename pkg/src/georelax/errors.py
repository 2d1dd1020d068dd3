"""Exception types raised by georelax."""


class GeoRelaxError(Exception):
    """Base class for all library errors."""


class InvalidInputError(GeoRelaxError, ValueError):
    """An argument violates a documented precondition."""


class SingularityError(GeoRelaxError, ValueError):
    """A transformation parameter hits (or a box crosses) a non-invertible point."""


class ShapeError(GeoRelaxError, ValueError):
    """Array or network shapes do not chain."""


class ResourceError(GeoRelaxError, RuntimeError):
    """A requested mesh or batch exceeds the configured budget."""
