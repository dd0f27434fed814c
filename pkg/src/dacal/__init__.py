"""Density-aware post-hoc calibration of classifier outputs.

Logits are rescaled per sample by a factor built from k-nearest-neighbour
distances in hidden-layer feature space, then passed to a standard
calibrator (temperature scaling, ensemble TS, or isotonic regression).
"""
__version__ = "0.1.0"

from ._accel import backend
from .baselines import apply_ets, apply_ir, apply_irm, apply_ts, fit_ets, fit_ir, fit_irm, fit_ts
from .calibrator import CalibratorModel, compose, parse_method
from .core import CalibrationDataset, l2_normalize_rows, softmax_rows, spatial_average
from .dac import DacModel, FitReport, apply_dac, fit_dac, rescale_logits, scale_factor
from .errors import ConfigError, ConvergenceWarning, DacError, DataError, FormatError, ShapeError
from .io import Manifest, load_manifest, load_tensor, save_tensor
from .knn import DensityMatrix, KnnIndex, build_index, build_indices, density_profile, kth_distance
from .metrics import OodScores, brier, classwise_ece, ece_equal_mass, ece_equal_width, nll
from .synth import SynthConfig, benchmark_config, generate

__all__ = [
    "CalibrationDataset",
    "CalibratorModel",
    "ConfigError",
    "ConvergenceWarning",
    "DacError",
    "DacModel",
    "DataError",
    "DensityMatrix",
    "FitReport",
    "FormatError",
    "KnnIndex",
    "Manifest",
    "OodScores",
    "ShapeError",
    "SynthConfig",
    "apply_dac",
    "apply_ets",
    "apply_ir",
    "apply_irm",
    "apply_ts",
    "backend",
    "benchmark_config",
    "brier",
    "build_index",
    "build_indices",
    "classwise_ece",
    "compose",
    "density_profile",
    "ece_equal_mass",
    "ece_equal_width",
    "fit_dac",
    "fit_ets",
    "fit_ir",
    "fit_irm",
    "fit_ts",
    "generate",
    "kth_distance",
    "l2_normalize_rows",
    "load_manifest",
    "load_tensor",
    "nll",
    "parse_method",
    "rescale_logits",
    "save_tensor",
    "scale_factor",
    "softmax_rows",
    "spatial_average",
]
