"""Restoration of synthetically corrupted slices; score = restoration residual."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..backbone import TrainConfig, UNetConfig, build_unet, train_loop
from ..errors import ConfigError
from ..synth import (
    TissueClusters,
    disyre_augment,
    disyre_corrupt,
    fit_tissue_clusters,
    sample_anomaly,
)
from .base import Detector, finish_training, register, to_tensor


@dataclass
class DisyreConfig:
    num_latents: int = 100
    beta_min: float = 0.1
    beta_max: float = 20.0
    patch_size: int = 64
    full_slice: bool = True
    augmentations_on: bool = True
    n_tissues: int = 5
    # >1 averages restoration residuals over evenly spaced corruption levels.
    ensemble_levels: int = 1

    def __post_init__(self):
        if self.num_latents < 1:
            raise ConfigError("num_latents must be >= 1")
        if not self.beta_min < self.beta_max:
            raise ConfigError(
                f"need beta_min < beta_max, got ({self.beta_min}, {self.beta_max})"
            )
        if self.patch_size < 8:
            raise ConfigError("patch_size must be >= 8")
        if self.ensemble_levels < 1 or self.ensemble_levels > self.num_latents:
            raise ConfigError("ensemble_levels must lie in [1, num_latents]")


def _conditioning_levels(config: DisyreConfig) -> list[int]:
    if config.ensemble_levels == 1:
        return [config.num_latents]
    return (
        np.linspace(1, config.num_latents, config.ensemble_levels).round().astype(int).tolist()
    )


def disyre_anomaly_map(
    model, slice2d: np.ndarray, config: DisyreConfig, stride: int | None = None
) -> np.ndarray:
    """Absolute restoration residual |slice - model(slice)|.

    Full-slice mode runs one pass conditioned on full corruption strength;
    patch mode scores overlapping patches and averages overlap regions.
    """
    image = np.asarray(slice2d, dtype=np.float32)
    model.eval()

    def restore(patch: np.ndarray) -> np.ndarray:
        x = to_tensor(patch)
        residual = np.zeros_like(patch, dtype=np.float64)
        levels = _conditioning_levels(config)
        with torch.no_grad():
            for t in levels:
                t_cond = torch.full((1,), float(t))
                restored = model(x, t_cond)[0, 0].numpy()
                residual += np.abs(patch - restored)
        return residual / len(levels)

    if config.full_slice:
        return restore(image).astype(np.float32)

    p = config.patch_size
    h, w = image.shape
    if p > h or p > w:
        raise ConfigError(f"patch_size {p} exceeds slice shape {(h, w)}")
    stride = stride if stride is not None else max(1, p // 2)
    starts_r = sorted(set(list(range(0, h - p + 1, stride)) + [h - p]))
    starts_c = sorted(set(list(range(0, w - p + 1, stride)) + [w - p]))
    total = np.zeros((h, w), dtype=np.float64)
    counts = np.zeros((h, w), dtype=np.float64)
    for r in starts_r:
        for c in starts_c:
            total[r : r + p, c : c + p] += restore(image[r : r + p, c : c + p])
            counts[r : r + p, c : c + p] += 1.0
    return (total / counts).astype(np.float32)


@register
class DisyreDetector(Detector):
    name = "disyre"

    def __init__(self, unet: UNetConfig, train: TrainConfig, config: DisyreConfig | None = None):
        self.config = config if config is not None else DisyreConfig()
        if not unet.time_conditioning:
            raise ConfigError("restoration model is conditioned on the corruption level")
        self.train_config = train
        self.model = build_unet(unet)
        self.clusters: TissueClusters | None = None

    def fit(self, train_slices, val_slices, seed: int) -> None:
        cfg = self.config
        slices = np.asarray(train_slices, dtype=np.float64)
        rng = np.random.default_rng(seed)

        # Tissue clusters from nonzero training intensities (1D k-means).
        pix = np.concatenate([s[s > 0].ravel() for s in slices])
        if pix.size == 0:
            raise ConfigError("training slices are entirely zero")
        k = min(cfg.n_tissues, max(1, np.unique(pix).size))

        class _Wrap:
            def __init__(self, values):
                self.voxels = values[None]
                self.brain_mask = np.ones_like(self.voxels, dtype=bool)

        self.clusters = fit_tissue_clusters([_Wrap(pix)], k=k, seed=seed, modality="synthetic")

        side = min(slices.shape[1], slices.shape[2], cfg.patch_size)

        def build_examples(pool, ex_rng, count):
            xs, ys, ts = [], [], []
            for _ in range(count):
                s = pool[ex_rng.integers(pool.shape[0])]
                if cfg.augmentations_on:
                    s = disyre_augment(s, int(ex_rng.integers(2**31 - 1)))
                if not cfg.full_slice:
                    r = ex_rng.integers(0, s.shape[0] - side + 1)
                    c = ex_rng.integers(0, s.shape[1] - side + 1)
                    s = s[r : r + side, c : c + side]
                t = int(ex_rng.integers(1, cfg.num_latents + 1))
                anomaly = sample_anomaly(
                    max(s.shape), int(ex_rng.integers(2**31 - 1)), len(self.clusters.centroids)
                )
                anomaly.mask = anomaly.mask[: s.shape[0], : s.shape[1]]
                corrupted, target = disyre_corrupt(
                    s, t, cfg.num_latents, anomaly, int(ex_rng.integers(2**31 - 1)), self.clusters
                )
                assert np.array_equal(target, s), "training target must be the clean slice"
                xs.append(corrupted)
                ys.append(target)
                ts.append(float(t))

            def to_t(arr):
                return torch.from_numpy(np.stack(arr)[:, None]).float()

            return to_t(xs), to_t(ys), torch.tensor(ts)

        batch_size = self.train_config.batch_size

        class _Stream:
            def __iter__(self):
                while True:
                    yield build_examples(slices, rng, batch_size)

        def loss_fn(model, batch):
            corrupted, target, t = batch
            return torch.mean((model(corrupted, t) - target) ** 2)

        def eval_loss(model, batch):
            pool = batch[:, 0].numpy().astype(np.float64)
            examples = build_examples(pool, np.random.default_rng(seed), pool.shape[0])
            return loss_fn(model, examples)

        ckpts = train_loop(self.model, _Stream(), loss_fn, self.train_config)
        chosen = finish_training(self.model, ckpts, val_slices, eval_loss)
        self.checkpoint_steps = tuple(c.step for c in ckpts)
        self.selected_step = chosen.step

    def score(self, slice2d: np.ndarray) -> np.ndarray:
        return disyre_anomaly_map(self.model, slice2d, self.config)
