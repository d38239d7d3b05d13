"""Temperature-based calibration for dense segmentation outputs.

Global, image-based and local (per-pixel) temperature scaling, region-aware
calibration metrics, and calibrated multi-atlas label fusion.
"""
from ._accel import BACKEND
from .errors import (CalibraError, DomainError, EmptyRegion, FormatError, IoError, NumericalError,
                     StateError, UnsupportedLayout, ValidationError)
from .scaling import (CalibratedOutput, Diagnosis, confidence_diagnosis, entropy, nll,
                      softmax_temp, true_class_logit_sum, weighted_avg_logit)
from .tensor_core import (Dataset, ImageTensor, LabelMap, LogitMap, ProbMap, Sample,
                          TemperatureField, load_dataset, load_npy, save_dataset, save_npy)

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "CalibraError", "DomainError", "EmptyRegion", "FormatError", "IoError", "NumericalError",
    "StateError", "UnsupportedLayout", "ValidationError",
    "CalibratedOutput", "Diagnosis", "confidence_diagnosis", "entropy", "nll", "softmax_temp",
    "true_class_logit_sum", "weighted_avg_logit",
    "Dataset", "ImageTensor", "LabelMap", "LogitMap", "ProbMap", "Sample", "TemperatureField",
    "load_dataset", "load_npy", "save_dataset", "save_npy",
]
