"""Reverse distillation: a student decodes a bottleneck embedding back into
the frozen teacher's multi-layer features; low cosine similarity flags anomalies."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..backbone import FeatureExtractorSpec, TrainConfig, extract_features, train_loop
from ..errors import ConfigError, ZeroVarianceWarning
from .base import Detector, finish_training, register, slice_stream, to_tensor

_NORM_EPS = 1e-12


def _default_extractor() -> FeatureExtractorSpec:
    return FeatureExtractorSpec(
        topology="resnet18", layer_names=("layer1", "layer2", "layer3")
    )


@dataclass
class RdConfig:
    extractor: FeatureExtractorSpec = field(default_factory=_default_extractor)
    layers: tuple[str, ...] = ("layer1", "layer2", "layer3")
    bottleneck_policy: str = "halve-deepest"

    def __post_init__(self):
        if not self.layers:
            raise ConfigError("layers must be nonempty")
        missing = [l for l in self.layers if l not in self.extractor.layer_names]
        if missing:
            raise ConfigError(f"layers {missing} not produced by the extractor spec")


def cosine_distance_map(teacher: torch.Tensor, student: torch.Tensor) -> torch.Tensor:
    """1 - cosine similarity per spatial position; zero-norm vectors score 1.

    Output range is [0, 2]; a zero-norm feature vector on either side has
    undefined cosine, defined here as 0 (maximum mismatch short of
    antiparallel) and flagged with a warning.
    """
    dot = (teacher * student).sum(dim=1)
    norms = teacher.norm(dim=1) * student.norm(dim=1)
    degenerate = norms < _NORM_EPS
    if bool(degenerate.any()):
        warnings.warn(
            "zero-norm feature vector; cosine defined as 0 there",
            ZeroVarianceWarning,
            stacklevel=2,
        )
    cos = torch.where(degenerate, torch.zeros_like(dot), dot / norms.clamp_min(_NORM_EPS))
    return 1.0 - cos


class RdStudent(nn.Module):
    """Bottleneck over the deepest teacher map plus an upsampling decoder
    emitting one student map per requested teacher layer (deepest first)."""

    def __init__(self, layer_channels: list[int], bottleneck_policy: str):
        super().__init__()
        deepest = layer_channels[-1]
        if bottleneck_policy == "halve-deepest":
            mid = max(8, deepest // 2)
        else:
            mid = deepest
        self.bottleneck = nn.Sequential(
            nn.Conv2d(deepest, mid, 3, stride=2, padding=1),
            nn.BatchNorm2d(mid),
            nn.ReLU(),
        )
        stages = []
        prev = mid
        for ch in reversed(layer_channels):
            stages.append(
                nn.Sequential(
                    nn.Conv2d(prev, ch, 3, padding=1),
                    nn.BatchNorm2d(ch),
                    nn.ReLU(),
                    nn.Conv2d(ch, ch, 3, padding=1),
                )
            )
            prev = ch
        self.stages = nn.ModuleList(stages)

    def forward(self, deepest_feat: torch.Tensor, sizes: list[tuple[int, int]]) -> list[torch.Tensor]:
        h = self.bottleneck(deepest_feat)
        outputs = []
        for stage, size in zip(self.stages, reversed(sizes)):
            h = F.interpolate(h, size=size, mode="bilinear", align_corners=False)
            h = stage(h)
            outputs.append(h)
        return list(reversed(outputs))  # shallow-to-deep, matching teacher order


def _teacher_maps(config: RdConfig, slices: torch.Tensor) -> list[torch.Tensor]:
    feats = extract_features(config.extractor, slices)
    return [feats[name] for name in config.layers]


def rd_anomaly_map(student: RdStudent, slice2d: np.ndarray, config: RdConfig) -> np.ndarray:
    """Layer-averaged cosine-distance map, upsampled to the slice size."""
    x = to_tensor(slice2d)
    student.eval()
    with torch.no_grad():
        teacher = _teacher_maps(config, x)
        sizes = [t.shape[-2:] for t in teacher]
        outputs = student(teacher[-1], sizes)
        total = torch.zeros(1, 1, *x.shape[-2:])
        for t, s in zip(teacher, outputs):
            d = cosine_distance_map(t, s)[:, None]
            total = total + F.interpolate(d, size=x.shape[-2:], mode="bilinear", align_corners=False)
    return (total / len(teacher))[0, 0].numpy()


@register
class RdDetector(Detector):
    name = "rd"

    def __init__(self, train: TrainConfig, config: RdConfig | None = None):
        self.config = config if config is not None else RdConfig()
        self.train_config = train
        self.student: RdStudent | None = None

    def _ensure_model(self, sample_slice: np.ndarray) -> None:
        if self.student is None:
            with torch.no_grad():
                teacher = _teacher_maps(self.config, to_tensor(sample_slice))
            self.student = RdStudent(
                [t.shape[1] for t in teacher], self.config.bottleneck_policy
            )

    def fit(self, train_slices, val_slices, seed: int) -> None:
        cfg = self.config
        self._ensure_model(np.asarray(train_slices)[0])

        def loss_fn(student, batch):
            with torch.no_grad():
                teacher = _teacher_maps(cfg, batch)
            sizes = [t.shape[-2:] for t in teacher]
            outputs = student(teacher[-1], sizes)
            loss = 0.0
            for t, s in zip(teacher, outputs):
                loss = loss + cosine_distance_map(t, s).mean()
            return loss / len(teacher)

        stream = slice_stream(train_slices, self.train_config.batch_size, seed)
        ckpts = train_loop(self.student, stream, loss_fn, self.train_config)
        chosen = finish_training(self.student, ckpts, val_slices, loss_fn)
        self.checkpoint_steps = tuple(c.step for c in ckpts)
        self.selected_step = chosen.step

    def score(self, slice2d: np.ndarray) -> np.ndarray:
        self._ensure_model(np.asarray(slice2d))
        return rd_anomaly_map(self.student, slice2d, self.config)
