"""Exception hierarchy shared by all fluorokit modules."""


class FluorokitError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(FluorokitError):
    """An argument violates a documented precondition."""


class DegenerateCameraError(FluorokitError):
    """Camera matrix cannot be decomposed (left 3x3 block singular)."""


class PointAtInfinityError(FluorokitError):
    """Projection denominator vanished; point lies on the principal plane."""


class InsufficientViewsError(FluorokitError):
    """Fewer views supplied than the operation needs."""


class DegenerateGeometryError(FluorokitError):
    """View geometry leaves the triangulation system rank-deficient."""


class FormatError(FluorokitError):
    """On-disk data is malformed. ``field`` names the offending entry."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class UnsupportedConfigurationError(FluorokitError):
    """A geometrically valid but unsupported setup (e.g. camera in volume)."""


class InsufficientPointsError(FluorokitError):
    """Too few correspondences for a camera solve."""


class DegenerateConfigurationError(FluorokitError):
    """Point configuration is degenerate for the requested solve."""


class NoSolutionError(FluorokitError):
    """Every candidate in a search was degenerate; nothing to return."""


class CropTooSmallError(FluorokitError):
    """Requested crop window is too small to resample."""


class IncompatibleGridsError(FluorokitError):
    """Two grids do not share dims, voxel size, and origin."""


class EmptySurfaceError(FluorokitError):
    """A surface-distance metric received an empty point set."""


class EmptySummaryError(FluorokitError):
    """An aggregation was requested over zero inputs."""
