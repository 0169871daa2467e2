"""Frozen 2D feature extractors with a uniform layer-capture contract."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from ..errors import ConfigError

VALID_LAYERS = {
    "resnet18": ("maxpool", "layer1", "layer2", "layer3", "layer4"),
    "wide_resnet50": ("maxpool", "layer1", "layer2", "layer3", "layer4"),
    "efficientnet_b4": tuple(f"features.{i}" for i in range(1, 9)),
    "tiny_random": ("maxpool", "layer1", "layer2", "layer3", "layer4"),
}


@dataclass
class FeatureExtractorSpec:
    topology: str
    layer_names: tuple[str, ...]
    pretrained: bool = False
    weights_seed: int = 0

    def __post_init__(self):
        if self.topology not in VALID_LAYERS:
            raise ConfigError(
                f"unknown topology {self.topology!r}; valid: {sorted(VALID_LAYERS)}"
            )
        self.layer_names = tuple(self.layer_names)
        if not self.layer_names:
            raise ConfigError("layer_names must be nonempty")
        valid = VALID_LAYERS[self.topology]
        bad = [n for n in self.layer_names if n not in valid]
        if bad:
            raise ConfigError(f"unknown layer name(s) {bad}; valid: {list(valid)}")

    def cache_key(self) -> tuple:
        return (self.topology, self.pretrained, self.weights_seed)


class TinyResNetLike(nn.Module):
    """Randomly initialized stand-in matching resnet18 stage names and strides.

    The stem applies smoothed ramp responses ReLU(s_j * (blur(x) - theta_j))
    with thresholds stratified across the unit intensity range, a random
    binning of intensity. Stratification guarantees that for every seed some
    channels stay silent on any intensity band the data never visits, which
    keeps such off-range content linearly separable in feature space instead
    of collapsing onto rescaled versions of in-range content (a bias-free
    ReLU stack is positively homogeneous and would do exactly that). Deeper
    stages mix the bins with random signed gains, spreading any unusual bin
    activation across many channels. All spatial profiles are a fixed smooth
    3x3 kernel so the features do not amplify voxel noise and windowed
    similarity scores on them stay meaningful.
    """

    def __init__(self, seed: int):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        smooth = torch.tensor(
            [[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]]
        ) / 16.0

        def stem(out_ch):
            layer = nn.Conv2d(3, out_ch, 3, stride=2, padding=1)
            with torch.no_grad():
                jitter = torch.rand(out_ch, generator=gen)
                thresholds = (torch.arange(out_ch) + 0.25 + 0.5 * jitter) / out_ch
                slopes = 0.5 + 1.5 * torch.rand(out_ch, generator=gen)
                weight = slopes[:, None, None, None] * smooth / 3.0
                layer.weight.copy_(weight.expand(out_ch, 3, 3, 3))
                layer.bias.copy_(-slopes * thresholds)
            return layer

        def conv(in_ch, out_ch, stride):
            layer = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1)
            with torch.no_grad():
                gains = torch.randn(out_ch, in_ch, 1, 1, generator=gen)
                gains *= (2.0 / in_ch) ** 0.5
                layer.weight.copy_(gains * smooth)
                layer.bias.copy_(torch.randn(layer.bias.shape, generator=gen) * 0.1)
            return layer

        self.conv1 = stem(16)
        self.pool = nn.MaxPool2d(3, stride=2, padding=1)
        self.layer1 = nn.Sequential(conv(16, 16, 1), nn.ReLU())
        self.layer2 = nn.Sequential(conv(16, 32, 2), nn.ReLU())
        self.layer3 = nn.Sequential(conv(32, 32, 2), nn.ReLU())
        self.layer4 = nn.Sequential(conv(32, 64, 2), nn.ReLU())

    def forward_captures(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        out = {}
        x = self.pool(torch.relu(self.conv1(x)))
        out["maxpool"] = x
        for name in ("layer1", "layer2", "layer3", "layer4"):
            x = getattr(self, name)(x)
            out[name] = x
        return out


class _ResNetCaptures(nn.Module):
    def __init__(self, model):
        super().__init__()
        self.model = model

    def forward_captures(self, x):
        m = self.model
        out = {}
        x = m.maxpool(m.relu(m.bn1(m.conv1(x))))
        out["maxpool"] = x
        for name in ("layer1", "layer2", "layer3", "layer4"):
            x = getattr(m, name)(x)
            out[name] = x
        return out


class _EfficientNetCaptures(nn.Module):
    def __init__(self, model):
        super().__init__()
        self.model = model

    def forward_captures(self, x):
        out = {}
        for i, stage in enumerate(self.model.features):
            x = stage(x)
            out[f"features.{i}"] = x
        return out


_MODEL_CACHE: dict[tuple, nn.Module] = {}


def _build_model(spec: FeatureExtractorSpec) -> nn.Module:
    import torchvision.models as tvm

    # Fork the RNG so weight init neither disturbs the caller's stream
    # nor depends on whether the cache already holds this model.
    with torch.random.fork_rng():
        torch.manual_seed(spec.weights_seed)
        if spec.topology == "tiny_random":
            model = TinyResNetLike(spec.weights_seed)
        elif spec.topology == "resnet18":
            weights = tvm.ResNet18_Weights.IMAGENET1K_V1 if spec.pretrained else None
            model = _ResNetCaptures(tvm.resnet18(weights=weights))
        elif spec.topology == "wide_resnet50":
            weights = tvm.Wide_ResNet50_2_Weights.IMAGENET1K_V1 if spec.pretrained else None
            model = _ResNetCaptures(tvm.wide_resnet50_2(weights=weights))
        else:
            weights = tvm.EfficientNet_B4_Weights.IMAGENET1K_V1 if spec.pretrained else None
            model = _EfficientNetCaptures(tvm.efficientnet_b4(weights=weights))
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def get_extractor(spec: FeatureExtractorSpec) -> nn.Module:
    key = spec.cache_key()
    if key not in _MODEL_CACHE:
        _MODEL_CACHE[key] = _build_model(spec)
    return _MODEL_CACHE[key]


def extract_features(spec: FeatureExtractorSpec, images) -> dict[str, torch.Tensor]:
    """Run frozen feature extraction over a batch of single-channel images.

    Images of shape (B, H, W) or (B, 1, H, W) are replicated to three
    channels; no ImageNet channel normalization is applied. Returns one
    detached map per requested layer, in request order.
    """
    if isinstance(images, np.ndarray):
        images = torch.from_numpy(images)
    images = images.float()
    if images.ndim == 3:
        images = images[:, None]
    if images.shape[1] == 1:
        images = images.repeat(1, 3, 1, 1)
    if images.shape[1] != 3:
        raise ConfigError(f"expected 1 or 3 channels, got {images.shape[1]}")
    model = get_extractor(spec)
    with torch.no_grad():
        captures = model.forward_captures(images)
    return {name: captures[name].detach() for name in spec.layer_names}
