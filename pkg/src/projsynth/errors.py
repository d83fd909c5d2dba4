"""Exception types shared across the toolkit."""


class ProjSynthError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(ProjSynthError):
    """Operand shapes are incompatible."""


class ParameterError(ProjSynthError):
    """A numeric or structural argument violates its precondition."""


class ConfigurationError(ProjSynthError):
    """A model or pipeline configuration is invalid."""


class GraphError(ProjSynthError):
    """Autodiff graph contract violation, e.g. backward on a non-scalar."""


class GeometryError(ProjSynthError):
    """Projection geometry is degenerate for the requested operation."""


class LoadError(ProjSynthError):
    """A persisted artifact is missing entries or declares wrong shapes."""


class IntegrityError(ProjSynthError):
    """Stored checksum does not match the payload."""


class UndefinedMetricError(ProjSynthError):
    """Metric undefined for these inputs, e.g. PSNR of identical images."""


class NumericalError(ProjSynthError):
    """Non-finite values appeared where finite ones are required."""
