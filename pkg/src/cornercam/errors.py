"""Exception hierarchy shared across the package."""


class CornerCamError(Exception):
    """Base class for all package errors."""


class GeometryError(CornerCamError):
    pass


class NoIntersection(GeometryError):
    """The plane misses the ellipsoid."""


class DegenerateIntersection(GeometryError):
    """The plane is tangent to the ellipsoid (single-point intersection)."""


class DegenerateFacet(GeometryError):
    """Facet bottom vertices coincide."""


class RayParallelToPlane(GeometryError):
    pass


class ResolutionTooCoarse(CornerCamError):
    """Oracle sampling grid puts too few samples on the facet."""


class MissingBackground(CornerCamError):
    """A moving facet has no stationary panel behind it."""


class CubeFormatError(CornerCamError):
    """Malformed or truncated cube file."""


class UnsupportedVersion(CubeFormatError):
    pass


class ConfigError(CornerCamError):
    pass


class ZeroReference(CornerCamError):
    """Reference early-bin total is zero; laser-power ratio undefined."""


class NoChangeDetected(CornerCamError):
    """Difference frame shows no change above the noise floor."""


class InvalidRate(CornerCamError):
    """A nonpositive model rate was paired with a positive count."""


class EmptyInput(CornerCamError):
    pass


class NonConvergenceWarning(UserWarning):
    """Post-burn-in acceptance rate fell outside the healthy band."""
