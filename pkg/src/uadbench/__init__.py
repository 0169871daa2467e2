"""Benchmark framework for unsupervised anomaly detection on 3D brain volumes."""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DegenerateRangeWarning,
    PlacementError,
    ThresholdLeakError,
    TrainingDivergedError,
    UadBenchError,
    VolumeDecodeError,
    VolumeIntegrityError,
    ZeroVarianceWarning,
)

__all__ = [
    "ConfigError",
    "DegenerateRangeWarning",
    "PlacementError",
    "ThresholdLeakError",
    "TrainingDivergedError",
    "UadBenchError",
    "VolumeDecodeError",
    "VolumeIntegrityError",
    "ZeroVarianceWarning",
    "__version__",
]
