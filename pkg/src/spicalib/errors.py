"""Exception hierarchy.

Every error carries its class name as the first token of ``str(err)`` so the
CLI can print the name verbatim for scripts that grep for it.
"""


class SpiCalibError(Exception):
    """Base class for all package errors."""

    def __str__(self):
        msg = super().__str__()
        return f"{type(self).__name__}: {msg}" if msg else type(self).__name__


class ConfigError(SpiCalibError):
    """Malformed configuration or command-line input."""


# geometry
class GeometryError(SpiCalibError):
    pass


class DepthAtInfinity(GeometryError):
    pass


class SingularIntrinsics(GeometryError):
    pass


class DegenerateNormalizer(GeometryError):
    pass


class DegenerateRays(GeometryError):
    pass


# rendering
class RenderError(SpiCalibError):
    pass


class InvalidRange(RenderError, ConfigError):
    pass


class CubeNotVisible(RenderError):
    pass


class InsufficientFaces(RenderError):
    pass


# phase analysis
class PhaseError(SpiCalibError):
    pass


class MismatchedDimensions(PhaseError):
    pass


class InsufficientFrames(PhaseError):
    pass


class MarkerNotFound(PhaseError):
    pass


# calibration
class CalibrationError(SpiCalibError):
    pass


class TooFewPoints(CalibrationError):
    pass


class SinglePlaneOnly(CalibrationError):
    pass


class DegenerateConfiguration(CalibrationError):
    pass


class RankDeficient(CalibrationError):
    pass


# model fitting
class FitError(SpiCalibError):
    pass


class DegenerateInput(FitError):
    pass


class SegmentationFailed(FitError):
    pass
