"""Reconstruction by inpainting: masked-region reconstruction scored by MSGMS."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..backbone import TrainConfig, UNetConfig, build_unet, train_loop
from ..errors import ConfigError
from .base import Detector, finish_training, register, slice_stream, to_tensor
from .similarity import msgms_map, ssim_map


@dataclass
class RiadConfig:
    k_list: tuple[int, ...] = (8, 16, 28, 32)
    n: int = 5
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    msgms_scales: int = 4
    ssim_window: int = 11

    def __post_init__(self):
        self.k_list = tuple(int(k) for k in self.k_list)
        if not self.k_list or any(k <= 0 for k in self.k_list):
            raise ConfigError(f"k_list must hold positive sizes, got {self.k_list}")
        if self.n < 2:
            raise ConfigError(f"n must be >= 2, got {self.n}")
        if len(self.loss_weights) != 3:
            raise ConfigError("loss_weights must be (l2, msgms, ssim)")
        if self.msgms_scales < 1:
            raise ConfigError("msgms_scales must be >= 1")


def riad_make_masks(shape: tuple[int, int], k: int, n: int, seed: int) -> list[np.ndarray]:
    """Partition the k-by-k region grid uniformly at random into n masks.

    Masks are pairwise disjoint and their union covers the image; the
    assignment is deterministic per seed.
    """
    h, w = shape
    if n < 2:
        raise ConfigError(f"n must be >= 2, got {n}")
    if h % k != 0 or w % k != 0:
        raise ConfigError(f"image {shape} is not tileable by k={k}")
    rng = np.random.default_rng(seed)
    cells = rng.integers(0, n, size=(h // k, w // k))
    assignment = np.kron(cells, np.ones((k, k), dtype=np.int64))
    return [(assignment == i).astype(np.float32) for i in range(n)]


def _stitched_reconstruction(model, batch: torch.Tensor, k: int, n: int, seed: int) -> torch.Tensor:
    """Reconstruct each masked subset and take every pixel from its masked pass."""
    h, w = batch.shape[-2:]
    masks = riad_make_masks((h, w), k, n, seed)
    estimate = torch.zeros_like(batch)
    for m in masks:
        mt = torch.from_numpy(m)[None, None].to(batch.dtype)
        recon = model(batch * (1.0 - mt))
        estimate = estimate + recon * mt
    return estimate


def riad_anomaly_map(model, slice2d: np.ndarray, config: RiadConfig, seed: int) -> np.ndarray:
    """Mean over region sizes of (1 - MSGMS) between input and stitched estimate."""
    x = to_tensor(slice2d)
    model.eval()
    total = torch.zeros_like(x)
    with torch.no_grad():
        for i, k in enumerate(config.k_list):
            estimate = _stitched_reconstruction(model, x, k, config.n, seed + i)
            total = total + (1.0 - msgms_map(x, estimate, config.msgms_scales))
    return (total / len(config.k_list))[0, 0].numpy()


@register
class RiadDetector(Detector):
    name = "riad"

    def __init__(self, unet: UNetConfig, train: TrainConfig, config: RiadConfig | None = None):
        self.config = config if config is not None else RiadConfig()
        for k in self.config.k_list:
            if unet.image_size % k != 0:
                raise ConfigError(f"image size {unet.image_size} not tileable by k={k}")
        self.unet_config = unet
        self.train_config = train
        self.model = build_unet(unet)
        self._seed = train.seed

    def fit(self, train_slices, val_slices, seed: int) -> None:
        cfg = self.config

        def loss_terms(model, batch, rng):
            k = int(rng.choice(cfg.k_list))
            estimate = _stitched_reconstruction(model, batch, k, cfg.n, int(rng.integers(2**31 - 1)))
            a, b, g = cfg.loss_weights
            l2 = torch.mean((estimate - batch) ** 2)
            msg = torch.mean(1.0 - msgms_map(batch, estimate, cfg.msgms_scales))
            ssm = torch.mean(1.0 - ssim_map(batch, estimate, cfg.ssim_window))
            return a * l2 + b * msg + g * ssm

        rng = np.random.default_rng(seed)

        def loss_fn(model, batch):
            return loss_terms(model, batch, rng)

        def eval_loss(model, batch):
            return loss_terms(model, batch, np.random.default_rng(seed))

        stream = slice_stream(train_slices, self.train_config.batch_size, seed)
        checkpoints = train_loop(self.model, stream, loss_fn, self.train_config)
        chosen = finish_training(self.model, checkpoints, val_slices, eval_loss)
        self.checkpoint_steps = tuple(c.step for c in checkpoints)
        self.selected_step = chosen.step
        self._seed = seed

    def score(self, slice2d: np.ndarray) -> np.ndarray:
        return riad_anomaly_map(self.model, slice2d, self.config, self._seed)
