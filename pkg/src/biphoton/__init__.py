"""Simulation and analysis toolkit for spatially entangled photon pairs behind scattering media.

The package covers the full chain at desk scale: transfer-matrix optics and
synthetic scattering media, two-photon state propagation with programmable
phase masks, binary single-photon-camera frame synthesis, joint-probability
estimation with accidental subtraction, sensor calibration (cross-talk, hot
pixels), the position/momentum uncertainty-product entanglement test, and a
two-basis entanglement-dimension witness.
"""

__version__ = "0.1.0"

from .optics import ModeGrid, TransferMatrix, MediumSpec, dft_matrix, free_space_kernel, synth_medium, measure_tm
from .states import TwoPhotonState, PhaseMask, GaussianPairSpec, input_state, propagate, correction_mask, condition_scores
from .spadsim import SensorSpec, FrameStack, simulate_frames, dark_stack
from .jpd import Jpd, Projection, accumulate_jpd, project_sum, project_minus, conditional_image
from .calibration import CrosstalkReference, HotPixelMask, characterize_crosstalk, correct_crosstalk, find_hot_pixels
from .epr import OpticalCalibration, EprReport, fit_gaussian_width, pixel_to_physical, epr_criterion
from .certify import PixelSet, CorrelationMatrix, WitnessReport, select_pixel_set, correlation_matrix, fidelity_bound, certified_dimension, unbiasedness
from .shaping import ShapingProblem, objective, optimize_masks
from .plateau import PlateauSpec, synth_correlation_pair, plateau_curve

__all__ = [
    "ModeGrid", "TransferMatrix", "MediumSpec", "dft_matrix", "free_space_kernel", "synth_medium", "measure_tm",
    "TwoPhotonState", "PhaseMask", "GaussianPairSpec", "input_state", "propagate", "correction_mask", "condition_scores",
    "SensorSpec", "FrameStack", "simulate_frames", "dark_stack",
    "Jpd", "Projection", "accumulate_jpd", "project_sum", "project_minus", "conditional_image",
    "CrosstalkReference", "HotPixelMask", "characterize_crosstalk", "correct_crosstalk", "find_hot_pixels",
    "OpticalCalibration", "EprReport", "fit_gaussian_width", "pixel_to_physical", "epr_criterion",
    "PixelSet", "CorrelationMatrix", "WitnessReport", "select_pixel_set", "correlation_matrix", "fidelity_bound",
    "certified_dimension", "unbiasedness",
    "ShapingProblem", "objective", "optimize_masks",
    "PlateauSpec", "synth_correlation_pair", "plateau_curve",
]
