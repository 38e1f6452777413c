"""Exception types shared across the package."""


class GroupsegError(Exception):
    """Base class for all package errors."""


class ShapeError(GroupsegError):
    """Operands have incompatible dimensions."""


class GeometryError(GroupsegError):
    """A spatial grid does not satisfy a layer's geometric preconditions."""


class ConfigError(GroupsegError):
    """A configuration value is missing, unknown, or inconsistent."""


class NumericError(GroupsegError):
    """A primitive produced non-finite values, or a loss went non-finite."""


class DegenerateColumnError(NumericError):
    """An assignment column has (near-)zero total mass and cannot be renormalized."""


class UsageError(GroupsegError):
    """An API was called outside its contract (e.g. backward on a non-scalar)."""


class ImageFormatError(GroupsegError):
    """A PPM/PGM stream is malformed; carries the byte offset of the defect."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset
