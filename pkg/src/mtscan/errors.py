"""Exception types shared across the package."""


class MtscanError(Exception):
    """Base class for all package errors."""


class ShapeError(MtscanError):
    """Operands have incompatible shapes."""


class NumericalError(MtscanError):
    """A forward computation produced NaN or Inf."""


class PermutationError(MtscanError):
    """An index map that must be a bijection is not."""


class ConfigError(MtscanError):
    """A configuration violates a structural constraint."""


class ProtocolError(MtscanError):
    """An object is used outside its intended protocol (e.g. missing inverse map)."""


class FormatError(MtscanError):
    """A binary file is malformed or truncated."""


class DataError(MtscanError):
    """A dataset sample or label is invalid."""


class MetricError(MtscanError):
    """A metric is undefined for the given inputs."""


class UsageError(MtscanError):
    """Invalid command-line usage."""
