from .features import VALID_LAYERS, FeatureExtractorSpec, extract_features, get_extractor
from .train import (
    Checkpoint,
    TrainConfig,
    config_fingerprint,
    seed_everything,
    select_checkpoint,
    train_loop,
)
from .unet import UNet, UNetConfig, build_unet

__all__ = [
    "VALID_LAYERS",
    "Checkpoint",
    "FeatureExtractorSpec",
    "TrainConfig",
    "UNet",
    "UNetConfig",
    "build_unet",
    "config_fingerprint",
    "extract_features",
    "get_extractor",
    "seed_everything",
    "select_checkpoint",
    "train_loop",
]
