"""Single-image calibration and measurement for a camera plus fringe-projecting
grating device, with a ray-cast digital twin for synthetic data."""

from .calibration import CalibrationResult, calibrate, calibrate_scene
from .errors import SpiCalibError
from .measurement import fit_cube, fit_plane, fit_sphere, reconstruct
from .phase import recover_phase
from .twin import build_scene, default_scene, render

__version__ = "0.1.0"

__all__ = [
    "CalibrationResult", "SpiCalibError", "build_scene", "calibrate", "calibrate_scene",
    "default_scene", "fit_cube", "fit_plane", "fit_sphere", "reconstruct", "recover_phase",
    "render",
]
