"""Anomaly-detection methods and their shared scoring utilities."""

from .base import METHOD_REGISTRY, Detector, make_detector, register, slice_stream, to_tensor
from .similarity import gms_map, gradient_magnitude, msgms_map, ssim_map
from .riad import RiadConfig, RiadDetector, riad_anomaly_map, riad_make_masks
from .itermask import (
    IterMaskConfig,
    IterMaskDetector,
    IterMaskResult,
    default_freq_radius,
    fit_healthy_threshold,
    itermask_anomaly_map,
    split_frequencies,
)
from .andi import (
    AndiConfig,
    AndiDetector,
    alpha_sigma,
    andi_anomaly_map,
    andi_logsnr,
    pyramid_noise,
)
from .disyre import DisyreConfig, DisyreDetector, disyre_anomaly_map
from .fae import FaeConfig, FaeDetector, FeatureAutoencoder, fae_anomaly_map, stack_layer_features
from .uniad import (
    UniadConfig,
    UniadDetector,
    UniadModel,
    build_neighbor_mask,
    feature_jitter,
    uniad_anomaly_map,
)
from .rd import RdConfig, RdDetector, RdStudent, cosine_distance_map, rd_anomaly_map
from .patchcore import (
    MemoryBank,
    PatchCoreConfig,
    PatchCoreDetector,
    build_memory_bank,
    embed_slices,
    greedy_coreset,
    nearest_distances,
    patchcore_anomaly_map,
)

__all__ = [
    "METHOD_REGISTRY",
    "Detector",
    "make_detector",
    "register",
    "slice_stream",
    "to_tensor",
    "gms_map",
    "gradient_magnitude",
    "msgms_map",
    "ssim_map",
    "RiadConfig",
    "RiadDetector",
    "riad_anomaly_map",
    "riad_make_masks",
    "IterMaskConfig",
    "IterMaskDetector",
    "IterMaskResult",
    "default_freq_radius",
    "fit_healthy_threshold",
    "itermask_anomaly_map",
    "split_frequencies",
    "AndiConfig",
    "AndiDetector",
    "alpha_sigma",
    "andi_anomaly_map",
    "andi_logsnr",
    "pyramid_noise",
    "DisyreConfig",
    "DisyreDetector",
    "disyre_anomaly_map",
    "FaeConfig",
    "FaeDetector",
    "FeatureAutoencoder",
    "fae_anomaly_map",
    "stack_layer_features",
    "UniadConfig",
    "UniadDetector",
    "UniadModel",
    "build_neighbor_mask",
    "feature_jitter",
    "uniad_anomaly_map",
    "RdConfig",
    "RdDetector",
    "RdStudent",
    "cosine_distance_map",
    "rd_anomaly_map",
    "MemoryBank",
    "PatchCoreConfig",
    "PatchCoreDetector",
    "build_memory_bank",
    "embed_slices",
    "greedy_coreset",
    "nearest_distances",
    "patchcore_anomaly_map",
]
