"""Exception hierarchy shared across the package."""


class KitsegError(Exception):
    """Base class for all package errors."""

    category = "error"


class ShapeError(KitsegError, ValueError):
    category = "shape"


class NonFiniteError(KitsegError, FloatingPointError):
    category = "non-finite"


class GraphError(KitsegError, RuntimeError):
    category = "graph"


class FormatError(KitsegError, ValueError):
    category = "format"


class BadMagicError(FormatError):
    category = "bad-magic"


class TruncatedError(FormatError):
    category = "truncated"


class UnknownDtypeError(FormatError):
    category = "unknown-dtype"


class NameCollisionError(FormatError):
    category = "name-collision"


class MissingParameterError(FormatError, KeyError):
    category = "missing-parameter"

    def __str__(self):
        return Exception.__str__(self)


class IncompatibleCheckpointError(KitsegError):
    category = "incompatible-checkpoint"


class EmptyGroupError(KitsegError, ValueError):
    category = "empty-group"


class LabelError(KitsegError, ValueError):
    category = "label"


class GeometryError(KitsegError, ValueError):
    category = "geometry"
