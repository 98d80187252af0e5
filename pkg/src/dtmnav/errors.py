"""Exception hierarchy shared by all dtmnav modules."""


class DtmnavError(Exception):
    """Base class for every error raised by this package."""


class DomainError(DtmnavError, ValueError):
    """A query fell outside the domain of a function (e.g. off the DTM)."""


class RayEscapesError(DtmnavError):
    """A view ray left the DTM footprint without touching the surface."""

    def __init__(self, message, indices=None):
        super().__init__(message)
        self.indices = [] if indices is None else list(indices)


class BelowSurfaceError(DtmnavError, ValueError):
    """Ray origin is not above the terrain."""


class BehindCameraError(DtmnavError, ValueError):
    """Point has non-positive depth along the optical axis."""


class DegenerateProjectionError(DtmnavError, ValueError):
    """Projection operator denominator vanished."""


class GrazingIncidenceError(DtmnavError, ValueError):
    """View ray is (nearly) parallel to the tangent plane."""


class FeatureError(DtmnavError):
    """A single flow correspondence cannot produce a residual."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class DegenerateGeometryError(DtmnavError):
    """The linearized pose/motion system is rank deficient."""

    def __init__(self, message, rank, singular_values=None):
        super().__init__(message)
        self.rank = rank
        self.singular_values = singular_values


class DegenerateAttitudeError(DtmnavError, ValueError):
    """Euler extraction too close to gimbal lock."""


class FilterError(DtmnavError):
    """Kalman filter numerical failure."""


class ScenarioError(DtmnavError):
    """A simulated scenario cannot be realized."""


class ConfigError(DtmnavError):
    """Configuration file is missing, malformed, or inconsistent."""


class DtmFormatError(DtmnavError, ValueError):
    """ASCII grid file is malformed or contains nodata cells."""
