"""Exception hierarchy shared across the package."""


class GeoBundleError(Exception):
    """Base class for all package-specific errors."""


class DimensionMismatch(GeoBundleError, ValueError):
    """Vector or matrix shapes are inconsistent with the declared space."""


class TangencyViolation(GeoBundleError, ValueError):
    """A vector is not tangent at the claimed base point."""


class InjectivityViolation(GeoBundleError, ValueError):
    """Exponential-map radius exceeds the injectivity bound on the sphere."""


class DegeneratePair(GeoBundleError, ValueError):
    """Two points form a degenerate pair (antipodal or coincident where forbidden)."""


class DegenerateDirection(GeoBundleError, ValueError):
    """A linear map annihilated the space-like part of a point."""


class DegenerateMidpoint(GeoBundleError, ValueError):
    """Weighted point sum has vanishing curvature norm; midpoint undefined."""


class UnsupportedMode(GeoBundleError, ValueError):
    """Operation not defined in the requested curvature mode."""


class EdgeListFormatError(GeoBundleError, ValueError):
    """An input edge-list or label file could not be parsed."""


class CheckpointFormatError(GeoBundleError, ValueError):
    """Checkpoint bytes are malformed or carry an unsupported version."""


class NonFiniteLoss(GeoBundleError, ArithmeticError):
    """Training produced a non-finite loss value."""
