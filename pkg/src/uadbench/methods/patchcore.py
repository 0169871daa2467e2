"""Memory-bank nearest-neighbor scoring over locally pooled features."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from ..backbone import FeatureExtractorSpec, extract_features
from ..errors import ConfigError
from .base import Detector, register, to_tensor


def _default_extractor() -> FeatureExtractorSpec:
    return FeatureExtractorSpec(topology="wide_resnet50", layer_names=("layer2", "layer3"))


@dataclass
class PatchCoreConfig:
    extractor: FeatureExtractorSpec = field(default_factory=_default_extractor)
    layers: tuple[str, str] = ("layer2", "layer3")
    patch_size: int = 5
    stride: int = 1
    target_dim: int = 1024
    coreset_fraction: float = 0.01
    num_neighbors: int = 1
    bank_subjects: int = 92

    def __post_init__(self):
        if not 0.0 < self.coreset_fraction <= 1.0:
            raise ConfigError(
                f"coreset_fraction must lie in (0,1], got {self.coreset_fraction}"
            )
        if self.num_neighbors < 1:
            raise ConfigError("num_neighbors must be >= 1")
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ConfigError("patch_size must be a positive odd integer")
        if self.stride < 1 or self.target_dim < 1 or self.bank_subjects < 1:
            raise ConfigError("stride, target_dim and bank_subjects must be positive")
        missing = [n for n in self.layers if n not in self.extractor.layer_names]
        if missing:
            raise ConfigError(f"layers {missing} not produced by the extractor spec")


@dataclass
class MemoryBank:
    vectors: np.ndarray
    provenance: dict

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or self.vectors.shape[0] == 0:
            raise ConfigError("memory bank must be a nonempty (N, D) array")
        if not np.all(np.isfinite(self.vectors)):
            raise ConfigError("memory bank vectors must be finite")


def greedy_coreset(
    vectors: np.ndarray, fraction: float, seed: int, start: int | None = None
) -> np.ndarray:
    """Farthest-point greedy subset of ceil(fraction * N) row indices.

    Starting from a seed-chosen row (or the explicit ``start`` index),
    each step adds the point with the largest distance to the selected
    set; ties resolve to the smallest index. Deterministic per seed.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[0] == 0:
        raise ConfigError("vectors must be a nonempty (N, D) array")
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction must lie in (0,1], got {fraction}")
    n = vectors.shape[0]
    m = math.ceil(fraction * n)
    if m >= n:
        return np.arange(n)
    if start is None:
        start = int(np.random.default_rng(seed).integers(n))
    elif not 0 <= start < n:
        raise ConfigError(f"start index {start} out of range for {n} vectors")
    selected = [start]
    min_dist = np.linalg.norm(vectors - vectors[start], axis=1)
    for _ in range(m - 1):
        nxt = int(np.argmax(min_dist))
        selected.append(nxt)
        min_dist = np.minimum(min_dist, np.linalg.norm(vectors - vectors[nxt], axis=1))
    return np.asarray(selected)


def embed_slices(config: PatchCoreConfig, slices: torch.Tensor) -> tuple[torch.Tensor, tuple[int, int]]:
    """Locally pooled, concatenated, dimension-pooled embeddings.

    Returns (B*h*w, target_dim) vectors plus the shallow grid shape (h, w).
    The deeper layer is upsampled to the shallower grid; channel
    concatenation is followed by adaptive average pooling to target_dim.
    """
    feats = extract_features(config.extractor, slices)
    maps = [feats[name] for name in config.layers]
    pad = config.patch_size // 2
    pooled = [
        F.avg_pool2d(m, config.patch_size, stride=config.stride, padding=pad, count_include_pad=False)
        for m in maps
    ]
    grid = pooled[0].shape[-2:]
    aligned = [
        p if p.shape[-2:] == grid else F.interpolate(p, size=grid, mode="bilinear", align_corners=False)
        for p in pooled
    ]
    stacked = torch.cat(aligned, dim=1)
    b, c, h, w = stacked.shape
    flat = stacked.permute(0, 2, 3, 1).reshape(b * h * w, 1, c)
    reduced = F.adaptive_avg_pool1d(flat, config.target_dim).squeeze(1)
    return reduced, (h, w)


def build_memory_bank(config: PatchCoreConfig, slices: np.ndarray, seed: int) -> MemoryBank:
    """Embed healthy slices and keep a greedy coreset of the patch vectors."""
    slices = np.asarray(slices, dtype=np.float32)
    with torch.no_grad():
        vectors, _ = embed_slices(config, torch.from_numpy(slices))
    vectors = vectors.numpy()
    idx = greedy_coreset(vectors, config.coreset_fraction, seed)
    return MemoryBank(
        vectors=vectors[idx],
        provenance={
            "seed": seed,
            "coreset_fraction": config.coreset_fraction,
            "n_source_vectors": int(vectors.shape[0]),
            "n_slices": int(slices.shape[0]),
        },
    )


def nearest_distances(bank: MemoryBank, queries: torch.Tensor, num_neighbors: int = 1) -> torch.Tensor:
    """Mean L2 distance from each query row to its nearest bank vectors."""
    if bank.vectors.shape[0] == 0:
        raise ConfigError("memory bank is empty")
    d = torch.cdist(queries, torch.from_numpy(bank.vectors).to(queries.dtype))
    k = min(num_neighbors, d.shape[1])
    return d.topk(k, dim=1, largest=False).values.mean(dim=1)


def patchcore_anomaly_map(bank: MemoryBank, slice2d: np.ndarray, config: PatchCoreConfig) -> np.ndarray:
    """Distance to the nearest bank vectors per location, upsampled."""
    x = to_tensor(slice2d)
    with torch.no_grad():
        vectors, (h, w) = embed_slices(config, x)
        dist = nearest_distances(bank, vectors, config.num_neighbors)
        grid_map = dist.reshape(1, 1, h, w)
        out = F.interpolate(grid_map, size=x.shape[-2:], mode="bilinear", align_corners=False)
    return out[0, 0].numpy()


@register
class PatchCoreDetector(Detector):
    name = "patchcore"

    def __init__(self, config: PatchCoreConfig | None = None, train=None):
        self.config = config if config is not None else PatchCoreConfig()
        self.bank: MemoryBank | None = None

    def fit(self, train_slices, val_slices, seed: int) -> None:
        self.bank = build_memory_bank(self.config, train_slices, seed)

    def score(self, slice2d: np.ndarray) -> np.ndarray:
        if self.bank is None:
            raise ConfigError("memory bank not built; call fit first")
        return patchcore_anomaly_map(self.bank, slice2d, self.config)
