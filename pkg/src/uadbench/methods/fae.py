"""Feature autoencoder: reconstruct stacked extractor features, score by SSIM."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..backbone import FeatureExtractorSpec, TrainConfig, extract_features, train_loop
from ..errors import ConfigError
from .base import Detector, finish_training, register, slice_stream, to_tensor
from .similarity import ssim_map


def _default_extractor() -> FeatureExtractorSpec:
    return FeatureExtractorSpec(
        topology="resnet18", layer_names=("maxpool", "layer1", "layer2")
    )


@dataclass
class FaeConfig:
    extractor: FeatureExtractorSpec = field(default_factory=_default_extractor)
    target_resolution: int = 56
    channels: tuple[int, ...] = (100, 150, 200, 300)
    ssim_window_train: int = 5
    ssim_window_test: int = 11
    dropout: float = 0.1

    def __post_init__(self):
        if self.ssim_window_train % 2 == 0 or self.ssim_window_test % 2 == 0:
            raise ConfigError("SSIM windows must be odd")
        if self.target_resolution < 4:
            raise ConfigError("target_resolution must be >= 4")
        if len(self.channels) < 2:
            raise ConfigError("channels needs at least an encoder width and a bottleneck")


def stack_layer_features(spec: FeatureExtractorSpec, slices: torch.Tensor, resolution: int) -> torch.Tensor:
    """Extract the configured layers, resize to one grid, concat channel-wise."""
    feats = extract_features(spec, slices)
    resized = [
        F.interpolate(f, size=(resolution, resolution), mode="bilinear", align_corners=False)
        for f in feats.values()
    ]
    return torch.cat(resized, dim=1)


class FeatureAutoencoder(nn.Module):
    """Strided conv encoder and mirrored decoder over stacked feature maps.

    The decoder upsamples to the sizes recorded on the way down, so odd
    grids (56 -> 28 -> 14 -> 7 -> 4) reconstruct at exactly the input size.
    """

    def __init__(self, in_channels: int, channels: tuple[int, ...], dropout: float):
        super().__init__()

        def down(cin, cout):
            return nn.Sequential(
                nn.Conv2d(cin, cout, 3, stride=2, padding=1),
                nn.BatchNorm2d(cout),
                nn.ReLU(),
                nn.Dropout2d(dropout),
            )

        def up(cin, cout, last=False):
            if last:
                return nn.Conv2d(cin, cout, 3, padding=1)
            return nn.Sequential(
                nn.Conv2d(cin, cout, 3, padding=1),
                nn.BatchNorm2d(cout),
                nn.ReLU(),
                nn.Dropout2d(dropout),
            )

        self.encoder_blocks = nn.ModuleList()
        prev = in_channels
        for c in channels:
            self.encoder_blocks.append(down(prev, c))
            prev = c
        self.decoder_blocks = nn.ModuleList()
        widths = list(reversed(channels[:-1])) + [in_channels]
        for i, c in enumerate(widths):
            self.decoder_blocks.append(up(prev, c, last=i == len(widths) - 1))
            prev = c

    def forward(self, x):
        sizes = []
        h = x
        for block in self.encoder_blocks:
            sizes.append(h.shape[-2:])
            h = block(h)
        for block, size in zip(self.decoder_blocks, reversed(sizes)):
            h = F.interpolate(h, size=size, mode="bilinear", align_corners=False)
            h = block(h)
        return h


def fae_anomaly_map(model, slice2d: np.ndarray, config: FaeConfig) -> np.ndarray:
    """1 - channel-mean SSIM between features and their reconstruction."""
    x = to_tensor(slice2d)
    model.eval()
    with torch.no_grad():
        feats = stack_layer_features(config.extractor, x, config.target_resolution)
        recon = model(feats)
        dissim = 1.0 - ssim_map(feats, recon, config.ssim_window_test).mean(dim=1, keepdim=True)
        out = F.interpolate(dissim, size=x.shape[-2:], mode="bilinear", align_corners=False)
    return out[0, 0].numpy()


@register
class FaeDetector(Detector):
    name = "fae"

    def __init__(self, train: TrainConfig, config: FaeConfig | None = None):
        self.config = config if config is not None else FaeConfig()
        self.train_config = train
        self.model: FeatureAutoencoder | None = None

    def _ensure_model(self, sample_slice: np.ndarray) -> None:
        if self.model is None:
            with torch.no_grad():
                feats = stack_layer_features(
                    self.config.extractor, to_tensor(sample_slice), self.config.target_resolution
                )
            self.model = FeatureAutoencoder(
                feats.shape[1], self.config.channels, self.config.dropout
            )

    def fit(self, train_slices, val_slices, seed: int) -> None:
        cfg = self.config
        self._ensure_model(np.asarray(train_slices)[0])

        def loss_fn(model, batch):
            with torch.no_grad():
                feats = stack_layer_features(cfg.extractor, batch, cfg.target_resolution)
            recon = model(feats)
            return torch.mean(1.0 - ssim_map(feats, recon, cfg.ssim_window_train))

        stream = slice_stream(train_slices, self.train_config.batch_size, seed)
        ckpts = train_loop(self.model, stream, loss_fn, self.train_config)
        chosen = finish_training(self.model, ckpts, val_slices, loss_fn)
        self.checkpoint_steps = tuple(c.step for c in ckpts)
        self.selected_step = chosen.step

    def score(self, slice2d: np.ndarray) -> np.ndarray:
        self._ensure_model(np.asarray(slice2d))
        return fae_anomaly_map(self.model, slice2d, self.config)
