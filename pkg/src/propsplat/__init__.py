"""Map-free radio path-loss modeling with anisotropic 3D Gaussians.

A log-distance baseline with a learnable path-loss exponent is corrected
by Gaussians that each add a dB offset to the links passing near them.
"""

__version__ = "0.1.0"

from .errors import (ChecksumError, DegenerateSegmentError, FrequencyMismatchError,
                     InvalidArgumentError, ModelFileError, NonFiniteGradientError,
                     PropSplatError, SchemaError, TruncatedFileError, VersionMismatchError)
from .geometry import build_covariance, project_point_onto_segment, quat_to_rotation
from .measurements import Measurement, MeasurementSet
from .model import (GaussianPrimitive, LinkQuery, ModelState, baseline_path_loss,
                    delta_path_loss, per_gaussian_trace, predict, predict_batch)
from .training import TrainConfig, finite_difference_check, loss_gradients, train
from .data_io import load_measurements, load_model, save_measurements, save_model
from .evaluation import (build_fingerprint_db, coverage_grid, diagnostics, error_metrics,
                         knn_localize)

__all__ = [
    "ChecksumError", "DegenerateSegmentError", "FrequencyMismatchError", "GaussianPrimitive",
    "InvalidArgumentError", "LinkQuery", "Measurement", "MeasurementSet", "ModelFileError",
    "ModelState", "NonFiniteGradientError", "PropSplatError", "SchemaError", "TrainConfig",
    "TruncatedFileError", "VersionMismatchError", "baseline_path_loss", "build_covariance",
    "build_fingerprint_db", "coverage_grid", "delta_path_loss", "diagnostics", "error_metrics",
    "finite_difference_check", "knn_localize", "load_measurements", "load_model",
    "loss_gradients", "per_gaussian_trace", "predict", "predict_batch",
    "project_point_onto_segment", "quat_to_rotation", "save_measurements", "save_model",
    "train",
]
