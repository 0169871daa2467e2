"""Iterative spatial-mask refinement seeded by low-frequency Fourier masking.

Two networks: the first reconstructs the image from its high-frequency
content alone, the second from a spatially masked image plus the
high-frequency channel. Iterations shrink the suspect mask towards regions
whose reconstruction error stays above a threshold fitted on healthy data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from ..backbone import TrainConfig, UNetConfig, build_unet, train_loop
from ..errors import ConfigError
from ..synth import sample_anomaly_mask
from .base import Detector, finish_training, register, slice_stream, to_tensor

HEALTHY_PERCENTILE = 98.0


@dataclass
class IterMaskConfig:
    freq_radius: float | None = None  # None: disk covering 10% of the spectrum
    healthy_threshold: float = float("nan")  # fit on healthy validation error
    stop_ratio: float = 0.05
    max_iters: int = 5

    def __post_init__(self):
        if self.freq_radius is not None and self.freq_radius <= 0:
            raise ConfigError(f"freq_radius must be positive, got {self.freq_radius}")
        if not 0.0 < self.stop_ratio <= 1.0:
            raise ConfigError(f"stop_ratio must lie in (0,1], got {self.stop_ratio}")
        if self.max_iters < 1:
            raise ConfigError(f"max_iters must be >= 1, got {self.max_iters}")


@dataclass
class IterMaskResult:
    anomaly_map: np.ndarray
    final_mask: np.ndarray
    converged: bool
    mask_sizes: list[int]


def default_freq_radius(h: int, w: int) -> float:
    """Radius of a centered disk covering 10% of the Fourier spectrum."""
    return math.sqrt(0.1 * h * w / math.pi)


def split_frequencies(image: np.ndarray, radius: float) -> tuple[np.ndarray, np.ndarray]:
    """Split an image into (low, high) frequency parts with a disk mask."""
    h, w = image.shape
    spectrum = np.fft.fftshift(np.fft.fft2(image))
    ys, xs = np.mgrid[0:h, 0:w]
    dist = np.sqrt((ys - h / 2.0) ** 2 + (xs - w / 2.0) ** 2)
    low_mask = dist <= radius
    low = np.real(np.fft.ifft2(np.fft.ifftshift(spectrum * low_mask)))
    return low.astype(np.float64), (image - low).astype(np.float64)


def _relative_mask_change(new: np.ndarray, old: np.ndarray) -> float:
    sym_diff = int(np.logical_xor(new, old).sum())
    union = int(np.logical_or(new, old).sum())
    return sym_diff / (union + 1)


def itermask_anomaly_map(model_freq, model_spatial, slice2d, config: IterMaskConfig) -> IterMaskResult:
    """Run the refinement loop; the continuous map is the final squared error.

    Iteration 0 reconstructs from the high-frequency image; later iterations
    mask the image with the thresholded previous error and reconstruct from
    (masked image, high-frequency) pairs. The loop stops when the relative
    mask change drops below stop_ratio, or flags non-convergence at
    max_iters.
    """
    if not np.isfinite(config.healthy_threshold):
        raise ConfigError("healthy_threshold is unset; fit it on healthy validation data")
    image = np.asarray(slice2d, dtype=np.float64)
    radius = config.freq_radius or default_freq_radius(*image.shape)
    _, high = split_frequencies(image, radius)
    x = to_tensor(image)
    hf = to_tensor(high)

    model_freq.eval()
    model_spatial.eval()
    with torch.no_grad():
        recon = model_freq(hf)[0, 0].numpy()
    err = (image - recon) ** 2
    mask = err > config.healthy_threshold
    mask_sizes = [int(mask.sum())]

    converged = False
    for _ in range(config.max_iters):
        masked = x * torch.from_numpy((~mask).astype(np.float32))[None, None]
        with torch.no_grad():
            recon = model_spatial(torch.cat([masked, hf], dim=1))[0, 0].numpy()
        err = (image - recon) ** 2
        new_mask = err > config.healthy_threshold
        change = _relative_mask_change(new_mask, mask)
        mask = new_mask
        mask_sizes.append(int(mask.sum()))
        if change < config.stop_ratio:
            converged = True
            break
    return IterMaskResult(
        anomaly_map=err.astype(np.float32),
        final_mask=mask,
        converged=converged,
        mask_sizes=mask_sizes,
    )


def fit_healthy_threshold(model_freq, slices, radius: float | None = None) -> float:
    """Percentile of first-pass reconstruction error over healthy slices."""
    errors = []
    model_freq.eval()
    for s in np.asarray(slices, dtype=np.float64):
        r = radius or default_freq_radius(*s.shape)
        _, high = split_frequencies(s, r)
        with torch.no_grad():
            recon = model_freq(to_tensor(high))[0, 0].numpy()
        errors.append(((s - recon) ** 2).ravel())
    return float(np.percentile(np.concatenate(errors), HEALTHY_PERCENTILE))


@register
class IterMaskDetector(Detector):
    name = "itermask"

    def __init__(self, unet: UNetConfig, train: TrainConfig, config: IterMaskConfig | None = None):
        self.config = config if config is not None else IterMaskConfig()
        if unet.input_channels != 1:
            raise ConfigError("base config must be single-channel; the second model adds one")
        self.train_config = train
        self.model_freq = build_unet(unet)
        spatial_cfg = UNetConfig(**{**unet.__dict__, "input_channels": 2})
        self.model_spatial = build_unet(spatial_cfg)
        self._radius = self.config.freq_radius or default_freq_radius(unet.image_size, unet.image_size)
        self.last_result: IterMaskResult | None = None

    def fit(self, train_slices, val_slices, seed: int) -> None:
        radius = self._radius

        def freq_loss(model, batch):
            hf = torch.stack(
                [torch.from_numpy(split_frequencies(b[0].numpy().astype(np.float64), radius)[1]) for b in batch]
            )[:, None].float()
            return torch.mean((model(hf) - batch) ** 2)

        stream = slice_stream(train_slices, self.train_config.batch_size, seed)
        ckpts_f = train_loop(self.model_freq, stream, freq_loss, self.train_config)
        chosen_f = finish_training(self.model_freq, ckpts_f, val_slices, freq_loss)

        def spatial_terms(model, batch, rng):
            hf_list, masked_list = [], []
            for b in batch:
                arr = b[0].numpy().astype(np.float64)
                _, high = split_frequencies(arr, radius)
                side = max(arr.shape)
                m = sample_anomaly_mask(side, int(rng.integers(2**31 - 1))) > 0.5
                m = m[: arr.shape[0], : arr.shape[1]]
                hf_list.append(torch.from_numpy(high))
                masked_list.append(torch.from_numpy(arr * ~m))
            hf = torch.stack(hf_list)[:, None].float()
            masked = torch.stack(masked_list)[:, None].float()
            return torch.mean((model(torch.cat([masked, hf], dim=1)) - batch) ** 2)

        rng = np.random.default_rng(seed + 1)

        def spatial_loss(model, batch):
            return spatial_terms(model, batch, rng)

        def spatial_eval(model, batch):
            return spatial_terms(model, batch, np.random.default_rng(seed + 1))

        stream = slice_stream(train_slices, self.train_config.batch_size, seed + 1)
        ckpts_s = train_loop(self.model_spatial, stream, spatial_loss, self.train_config)
        chosen_s = finish_training(self.model_spatial, ckpts_s, val_slices, spatial_eval)
        self.checkpoint_steps = tuple(c.step for c in ckpts_f) + tuple(c.step for c in ckpts_s)
        self.selected_step = chosen_s.step
        self.selected_steps = {"frequency": chosen_f.step, "spatial": chosen_s.step}

        # Healthy residual threshold; training slices are lesion-free here.
        self.config.healthy_threshold = fit_healthy_threshold(
            self.model_freq, train_slices, radius
        )

    def score(self, slice2d: np.ndarray) -> np.ndarray:
        result = itermask_anomaly_map(self.model_freq, self.model_spatial, slice2d, self.config)
        self.last_result = result
        return result.anomaly_map
